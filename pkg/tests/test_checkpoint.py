import numpy as np
import pytest

from speechchain.asr import ASRConfig, ASRModel
from speechchain.checkpoint import (
    Checkpoint,
    ConfigHashWarning,
    checkpoint_from,
    config_hash,
    load_checkpoint,
    load_partitions,
    save_checkpoint,
)
from speechchain.errors import CheckpointError, MissingArtifactError
from speechchain.optim import Adam

SMALL = ASRConfig(model_dim=8, head_count=2, ff_dim=16, enc_layers=1, dec_layers=1)


def _sample() -> Checkpoint:
    rng = np.random.default_rng(0)
    return Checkpoint(
        partitions={"asr.enc": {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}, "tts.va.duration": {"x": np.array([np.pi])}},
        frozen={"asr.enc": False, "tts.va.duration": True},
        optimizer={"asr": {"step": np.array([3.0]), "m/w": rng.normal(size=(3, 2))}},
        epoch=7,
        config_hash=config_hash({"alpha": 0.1}),
        meta={"phase": "B"},
    )


def test_round_trip_is_bit_exact(tmp_path):
    ckpt = _sample()
    path = save_checkpoint(tmp_path / "c.ckpt", ckpt)
    back = load_checkpoint(path)
    assert back == ckpt
    for k, v in ckpt.flat().items():
        assert back.flat()[k].tobytes() == v.tobytes()


def test_truncated_file_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", _sample())
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw[:10])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_corrupt_payload_and_version(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", _sample())
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    raw = bytearray(save_checkpoint(tmp_path / "d.ckpt", _sample()).read_bytes())
    raw[4] = 99
    (tmp_path / "d.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "d.ckpt")


def test_missing_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_config_hash_mismatch_warns(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", _sample())
    with pytest.warns(ConfigHashWarning):
        load_checkpoint(path, expected_config_hash=config_hash({"alpha": 0.2}))


def test_model_round_trip(tmp_path):
    model = ASRModel(SMALL, seed=0)
    opt = Adam(list(model.named_parameters()))
    model.set_trainable(False)
    ckpt = checkpoint_from({"asr": model}, {"asr": opt}, epoch=2, config={"x": 1})
    assert set(ckpt.partitions) == {"asr.enc", "asr.dec", "asr.linear", "asr.ctc"}
    assert all(ckpt.frozen.values())
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    other = ASRModel(SMALL, seed=5)
    load_partitions(other, load_checkpoint(tmp_path / "m.ckpt").partitions)
    for (_, a), (_, b) in zip(model.named_parameters(), other.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_load_partitions_shape_mismatch():
    small = checkpoint_from({"asr": ASRModel(SMALL)})
    bigger = ASRModel(ASRConfig(model_dim=16, head_count=2, ff_dim=16, enc_layers=1, dec_layers=1))
    with pytest.raises(CheckpointError, match="shape"):
        load_partitions(bigger, small.partitions)
