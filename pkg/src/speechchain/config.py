"""Experiment configuration: one JSON document, validated against the dataclass schema.

Every section is optional and falls back to the documented defaults of the
owning dataclass, except ``name`` and ``output_dir`` which identify the
experiment and must be present in a config file.  Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .asr import ASRConfig, ASRPretrainConfig
from .corpus import CorpusSplit, make_splits
from .errors import ConfigError, ContractError
from .experiment import ModelDims, PretrainSettings
from .speaker import SpeakerConfig, SpeakerPretrainConfig
from .training import TrainConfig
from .tts import TTSConfig, TTSPretrainConfig

REQUIRED_KEYS = ("name", "output_dir")


@dataclass
class CorpusConfig:
    n_speakers: int = 4
    n_paired: int = 200
    n_unpaired: int = 800
    seed: int = 0
    n_validation: int = 40
    n_test: int = 40
    n_base_words: int = 60
    n_extra_words: int = 60
    min_words: int = 3
    max_words: int = 10
    noise_std: float = 0.01

    def build(self) -> CorpusSplit:
        return make_splits(**dataclasses.asdict(self))


@dataclass
class ModelSection:
    asr: ASRConfig = field(default_factory=ASRConfig)
    tts: TTSConfig = field(default_factory=TTSConfig)
    speaker: SpeakerConfig = field(default_factory=SpeakerConfig)


@dataclass
class PretrainSection:
    asr: ASRPretrainConfig = field(default_factory=ASRPretrainConfig)
    tts: TTSPretrainConfig = field(default_factory=TTSPretrainConfig)
    speaker: SpeakerPretrainConfig = field(default_factory=SpeakerPretrainConfig)


@dataclass
class ExperimentConfig:
    name: str = "default"
    output_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.model.tts.speaker_dim != self.model.speaker.embed_dim:
            raise ConfigError(
                f"model.tts.speaker_dim ({self.model.tts.speaker_dim}) must equal model.speaker.embed_dim ({self.model.speaker.embed_dim})"
            )

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.model.asr, self.model.tts, self.model.speaker)

    @property
    def settings(self) -> PretrainSettings:
        return PretrainSettings(self.pretrain.asr, self.pretrain.tts, self.pretrain.speaker)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_scalar(value, tp, where: str):
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp!r}")


def _convert(value, tp, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(value, inner[0], where)
    return _check_scalar(value, tp, where)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {'.'.join(filter(None, [where, unknown[0]]))!r}")
    kwargs = {k: _convert(v, hints[k], ".".join(filter(None, [where, k]))) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ContractError, TypeError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict, require_identity: bool = True) -> ExperimentConfig:
    if require_identity:
        for key in REQUIRED_KEYS:
            if key not in data:
                raise ConfigError(f"missing config key {key!r}")
    return _build(ExperimentConfig, data, "")


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Defaults when ``path`` is None; otherwise the parsed and validated file."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
