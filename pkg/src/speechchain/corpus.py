"""Deterministic synthetic speech corpus.

Each phoneme owns a fixed spectral template, a duration (2-6 frames) and a
pitch factor.  A toy speaker scales the template by an energy gain, tilts it
across channels and sets channel ``F0_CHANNEL`` to ``f0_base * pitch_factor``.
Because every frame is generated from a known template, the ground-truth
pitch, energy and duration tracks are exact by construction.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, MissingArtifactError

PAD, BOS, EOS, SPACE = 0, 1, 2, 3
N_PHONEMES = 28
FIRST_PHONEME = 4
VOCAB_SIZE = FIRST_PHONEME + N_PHONEMES
FEAT_DIM = 16
F0_CHANNEL = 0
SILENCE_LEVEL = 0.05
INVENTORY_SEED = 20220605

SPECIALS = {PAD: "<pad>", BOS: "<s>", EOS: "</s>", SPACE: "|"}


def token_name(tok: int) -> str:
    return SPECIALS.get(tok, f"p{tok - FIRST_PHONEME:02d}")


@dataclass(frozen=True)
class PhonemeInventory:
    templates: np.ndarray  # (VOCAB_SIZE, FEAT_DIM); rows for specials other than SPACE unused
    durations: np.ndarray  # (VOCAB_SIZE,) frames
    pitch_factors: np.ndarray  # (VOCAB_SIZE,)


def phoneme_inventory(seed: int = INVENTORY_SEED) -> PhonemeInventory:
    rng = np.random.default_rng(seed)
    templates = np.zeros((VOCAB_SIZE, FEAT_DIM))
    templates[FIRST_PHONEME:, 1:] = rng.uniform(0.15, 1.0, size=(N_PHONEMES, FEAT_DIM - 1))
    templates[SPACE, 1:] = SILENCE_LEVEL
    durations = np.ones(VOCAB_SIZE, dtype=np.int64)
    durations[FIRST_PHONEME:] = rng.integers(2, 7, size=N_PHONEMES)
    pitch = np.zeros(VOCAB_SIZE)
    pitch[FIRST_PHONEME:] = rng.uniform(0.8, 1.25, size=N_PHONEMES)
    return PhonemeInventory(templates, durations, pitch)


INVENTORY = phoneme_inventory()


@dataclass(frozen=True)
class ToySpeaker:
    id: int
    f0_base: float
    spectral_tilt: float
    energy_gain: float


@dataclass
class ProsodyTrack:
    pitch: np.ndarray  # (L,)
    energy: np.ndarray  # (L,)
    durations: np.ndarray  # (L,) int

    def __post_init__(self):
        if not (len(self.pitch) == len(self.energy) == len(self.durations)):
            raise ContractError("ProsodyTrack: pitch, energy and durations must have equal length")


@dataclass
class Utterance:
    uid: str
    tokens: np.ndarray  # (L,) int, no BOS/EOS
    speaker: int
    features: np.ndarray  # (T, F)
    prosody: ProsodyTrack


@dataclass
class CorpusSplit:
    speakers: list[ToySpeaker]
    paired: list[Utterance]
    unpaired: list[np.ndarray]
    validation: list[Utterance]
    test: list[Utterance]
    seed: int
    noise_std: float = 0.01
    base_words: list[tuple[int, ...]] = field(default_factory=list)
    extra_words: list[tuple[int, ...]] = field(default_factory=list)


def make_speakers(n_speakers: int, seed: int) -> list[ToySpeaker]:
    """Speakers drawn from disjoint per-speaker bins of each attribute."""
    if n_speakers < 2:
        raise ContractError("make_speakers: need at least 2 speakers")
    rng = np.random.default_rng(seed)
    width = 1.0 / n_speakers

    def binned(lo, hi, order):
        u = (order + rng.uniform(0.2, 0.8, size=n_speakers)) * width
        return lo + (hi - lo) * u

    f0 = binned(1.0, 3.0, np.arange(n_speakers))
    tilt = binned(-1.0, 1.0, rng.permutation(n_speakers))
    gain = binned(0.6, 1.4, rng.permutation(n_speakers))
    return [ToySpeaker(i, float(f0[i]), float(tilt[i]), float(gain[i])) for i in range(n_speakers)]


def _speaker_frames(tokens: np.ndarray, speaker: ToySpeaker, inv: PhonemeInventory) -> np.ndarray:
    tilt = np.exp(speaker.spectral_tilt * (np.arange(FEAT_DIM) / (FEAT_DIM - 1) - 0.5))
    frames = inv.templates[tokens] * tilt * speaker.energy_gain
    frames[:, F0_CHANNEL] = speaker.f0_base * inv.pitch_factors[tokens]
    return frames


def render(
    tokens,
    speaker: ToySpeaker,
    rng: np.random.Generator | None = None,
    noise_std: float = 0.0,
    inventory: PhonemeInventory = INVENTORY,
) -> tuple[np.ndarray, ProsodyTrack]:
    """Render a token sequence (phonemes and word spaces) for ``speaker``.

    Returns the (T, F) features with T = sum of durations and the exact
    per-token pitch (F0-channel value), energy (frame L2 norm) and duration.
    Noise, when requested, is added to the features only.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise ContractError("render: expected a non-empty 1-D token sequence")
    if np.any((tokens < SPACE) | (tokens >= VOCAB_SIZE)):
        bad = int(tokens[(tokens < SPACE) | (tokens >= VOCAB_SIZE)][0])
        raise ContractError(f"render: unknown token {bad}")
    rows = _speaker_frames(tokens, speaker, inventory)
    durations = inventory.durations[tokens].copy()
    features = np.repeat(rows, durations, axis=0)
    prosody = ProsodyTrack(rows[:, F0_CHANNEL].copy(), np.linalg.norm(rows, axis=1), durations)
    if noise_std > 0:
        if rng is None:
            raise ContractError("render: noise requires an rng")
        features = features + rng.normal(0.0, noise_std, size=features.shape)
    return features, prosody


def recover_durations(features: np.ndarray) -> np.ndarray:
    """Run lengths of identical consecutive frames (valid for noiseless renders)."""
    change = np.any(features[1:] != features[:-1], axis=1)
    bounds = np.concatenate([[0], np.nonzero(change)[0] + 1, [len(features)]])
    return np.diff(bounds)


def _make_words(rng: np.random.Generator, count: int, exclude: set) -> list[tuple[int, ...]]:
    words: list[tuple[int, ...]] = []
    seen = set(exclude)
    while len(words) < count:
        n = int(rng.integers(2, 6))
        w = [int(rng.integers(FIRST_PHONEME, VOCAB_SIZE))]
        while len(w) < n:
            p = int(rng.integers(FIRST_PHONEME, VOCAB_SIZE))
            if p != w[-1]:
                w.append(p)
        t = tuple(w)
        if t not in seen:
            seen.add(t)
            words.append(t)
    return words


def _sentence(rng: np.random.Generator, words: list[tuple[int, ...]], min_words: int, max_words: int) -> tuple[int, ...]:
    n = int(rng.integers(min_words, max_words + 1))
    out: list[int] = []
    for i in range(n):
        if i:
            out.append(SPACE)
        out.extend(words[int(rng.integers(len(words)))])
    return tuple(out)


def make_splits(
    n_speakers: int = 4,
    n_paired: int = 200,
    n_unpaired: int = 800,
    seed: int = 0,
    n_validation: int = 40,
    n_test: int = 40,
    n_base_words: int = 60,
    n_extra_words: int = 60,
    min_words: int = 3,
    max_words: int = 10,
    noise_std: float = 0.01,
) -> CorpusSplit:
    """Sample and render the paired / unpaired / validation / test splits.

    Paired sentences use only the base word list; unpaired, validation and
    test sentences draw from base plus extra words, so the unpaired text
    carries words and word sequences never heard in paired speech.  All
    sentences are distinct across splits.
    """
    if n_speakers < 2:
        raise ContractError("make_splits: need at least 2 speakers")
    rng = np.random.default_rng(seed)
    speakers = make_speakers(n_speakers, seed)
    base = _make_words(rng, n_base_words, set())
    extra = _make_words(rng, n_extra_words, set(base))
    full = base + extra
    used: set[tuple[int, ...]] = set()

    def draw(words, count):
        out = []
        while len(out) < count:
            s = _sentence(rng, words, min_words, max_words)
            if s not in used:
                used.add(s)
                out.append(s)
        return out

    paired_text = draw(base, n_paired)
    unpaired_text = draw(full, n_unpaired)
    val_text = draw(full, n_validation)
    test_text = draw(full, n_test)

    def utterances(prefix, texts, noise):
        out = []
        for i, s in enumerate(texts):
            spk = speakers[i % n_speakers]
            feats, pros = render(s, spk, rng, noise)
            out.append(Utterance(f"{prefix}{i:04d}", np.array(s, dtype=np.int64), spk.id, feats, pros))
        return out

    return CorpusSplit(
        speakers=speakers,
        paired=utterances("paired", paired_text, noise_std),
        unpaired=[np.array(s, dtype=np.int64) for s in unpaired_text],
        validation=utterances("val", val_text, 0.0),
        test=utterances("test", test_text, 0.0),
        seed=seed,
        noise_std=noise_std,
        base_words=base,
        extra_words=extra,
    )


# ------------------------------------------------------------- serialization
_FEAT_MAGIC = b"SCFT"


def write_features(path: Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<I", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def read_features(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _FEAT_MAGIC:
        raise ContractError(f"{path}: not a feature file")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(shape))
    if len(raw) != offset + 8 * count:
        raise ContractError(f"{path}: truncated feature file")
    return np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def _utt_record(u: Utterance, feat_name: str) -> dict:
    return {
        "uid": u.uid,
        "tokens": u.tokens.tolist(),
        "speaker": u.speaker,
        "features": feat_name,
        "pitch": u.prosody.pitch.tolist(),
        "energy": u.prosody.energy.tolist(),
        "durations": u.prosody.durations.tolist(),
    }


def save_corpus(corpus: CorpusSplit, directory: Path) -> Path:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format": "speechchain-corpus",
        "version": 1,
        "seed": corpus.seed,
        "noise_std": corpus.noise_std,
        "speakers": [vars(s) for s in corpus.speakers],
        "base_words": [list(w) for w in corpus.base_words],
        "extra_words": [list(w) for w in corpus.extra_words],
        "unpaired": [t.tolist() for t in corpus.unpaired],
    }
    for split in ("paired", "validation", "test"):
        records = []
        for u in getattr(corpus, split):
            name = f"features/{u.uid}.bin"
            write_features(directory / name, u.features)
            records.append(_utt_record(u, name))
        manifest[split] = records
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_corpus(directory: Path) -> CorpusSplit:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"no corpus manifest at {path}")
    m = json.loads(path.read_text())

    def utts(records):
        return [
            Utterance(
                r["uid"],
                np.array(r["tokens"], dtype=np.int64),
                int(r["speaker"]),
                read_features(directory / r["features"]),
                ProsodyTrack(np.array(r["pitch"]), np.array(r["energy"]), np.array(r["durations"], dtype=np.int64)),
            )
            for r in records
        ]

    return CorpusSplit(
        speakers=[ToySpeaker(**s) for s in m["speakers"]],
        paired=utts(m["paired"]),
        unpaired=[np.array(t, dtype=np.int64) for t in m["unpaired"]],
        validation=utts(m["validation"]),
        test=utts(m["test"]),
        seed=int(m["seed"]),
        noise_std=float(m["noise_std"]),
        base_words=[tuple(w) for w in m["base_words"]],
        extra_words=[tuple(w) for w in m["extra_words"]],
    )
