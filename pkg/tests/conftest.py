import numpy as np
import pytest

from speechchain.asr import ASRConfig, ASRModel
from speechchain.corpus import make_splits
from speechchain.speaker import SpeakerConfig, SpeakerEmbedder
from speechchain.training import Models
from speechchain.tts import TTSConfig, TTSModel

TINY_ASR = ASRConfig(model_dim=8, head_count=2, ff_dim=16, enc_layers=1, dec_layers=1)
TINY_TTS = TTSConfig(model_dim=8, head_count=2, ff_dim=16, enc_layers=1, dec_layers=1, predictor_dim=8, postnet_channels=4, postnet_kernel=3)
TINY_SPK = SpeakerConfig(hidden_dim=8, head_count=2, ff_dim=16, attention_dim=4, embed_dim=6)


@pytest.fixture(scope="session")
def small_corpus():
    return make_splits(n_speakers=2, n_paired=12, n_unpaired=16, seed=3, n_validation=6, n_test=4, n_base_words=8, n_extra_words=8, min_words=1, max_words=2)


@pytest.fixture
def tiny_models():
    tts = TTSModel(TINY_TTS.__class__(**{**TINY_TTS.__dict__, "speaker_dim": TINY_SPK.embed_dim}), seed=2)
    spk = SpeakerEmbedder(TINY_SPK, n_speakers=2, seed=3)
    spk.freeze()
    return Models(ASRModel(TINY_ASR, seed=1), tts, spk)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------- acceptance reporting
_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(number, passed, detail)`` records one acceptance line and returns ``passed``."""
    table = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        table[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_CRITERIA, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for number in sorted(table):
            terminalreporter.write_line(table[number])
