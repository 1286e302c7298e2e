"""Versioned binary checkpoints of named parameter partitions.

Layout: ``SCCK`` magic, u32 format version, u64 header length, UTF-8 JSON
header, then the float64 little-endian payload.  The header lists every
array (partition, name, shape, offset), freeze flags, optimizer state keys,
the epoch counter, the config hash and a sha256 of the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, MissingArtifactError

MAGIC = b"SCCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class ConfigHashWarning(UserWarning):
    pass


def config_hash(config) -> str:
    """sha256 of the canonical JSON encoding of a config mapping."""
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class Checkpoint:
    partitions: dict[str, dict[str, np.ndarray]]
    frozen: dict[str, bool] = field(default_factory=dict)
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    epoch: int = 0
    config_hash: str = ""
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            _same_arrays(self.partitions, other.partitions)
            and _same_arrays(self.optimizer, other.optimizer)
            and self.frozen == other.frozen
            and self.epoch == other.epoch
            and self.config_hash == other.config_hash
            and self.meta == other.meta
            and self.version == other.version
        )

    def flat(self) -> dict[str, np.ndarray]:
        return {f"{p}/{n}": a for p, arrs in self.partitions.items() for n, a in arrs.items()}


def _same_arrays(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    for k in a:
        if a[k].keys() != b[k].keys():
            return False
        for n in a[k]:
            x, y = a[k][n], b[k][n]
            if x.shape != y.shape or x.tobytes() != y.tobytes():
                return False
    return True


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for group, table in (("param", ckpt.partitions), ("optim", ckpt.optimizer)):
        for part, arrays in table.items():
            for name, arr in arrays.items():
                data = np.ascontiguousarray(arr, dtype="<f8")
                entries.append({"group": group, "partition": part, "name": name, "shape": list(data.shape), "offset": offset})
                chunks.append(data.tobytes())
                offset += data.nbytes
    payload = b"".join(chunks)
    header = {
        "version": ckpt.version,
        "entries": entries,
        "frozen": ckpt.frozen,
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "meta": ckpt.meta,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, ckpt.version, len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_config_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated (no header)")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size + head_len
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size : start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    payload = raw[start:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tables: dict[str, dict] = {"param": {}, "optim": {}}
    for e in header["entries"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"]).astype(np.float64).reshape(e["shape"])
        tables[e["group"]].setdefault(e["partition"], {})[e["name"]] = arr
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        warnings.warn(f"{path}: config hash {header['config_hash'][:12]} differs from current {expected_config_hash[:12]}", ConfigHashWarning, stacklevel=2)
    return Checkpoint(tables["param"], header["frozen"], tables["optim"], header["epoch"], header["config_hash"], header["meta"], version)


# ----------------------------------------------------------- model bridging
def model_partitions(model) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, np.ndarray]] = {}
    for attr, part in model.PARTITIONS.items():
        for name, p in getattr(model, attr).named_parameters(f"{attr}."):
            out.setdefault(part, {})[name] = p.data.copy()
    return out


def frozen_flags(model) -> dict[str, bool]:
    flags: dict[str, list[bool]] = {}
    for attr, part in model.PARTITIONS.items():
        for _, p in getattr(model, attr).named_parameters():
            flags.setdefault(part, []).append(not p.requires_grad)
    return {part: all(v) for part, v in flags.items()}


def load_partitions(model, partitions: dict[str, dict[str, np.ndarray]], strict: bool = True) -> None:
    """Copy stored arrays into ``model`` in place; shapes must match."""
    for attr, part in model.PARTITIONS.items():
        stored = partitions.get(part)
        if stored is None:
            if strict:
                raise CheckpointError(f"checkpoint lacks partition {part!r}")
            continue
        for name, p in getattr(model, attr).named_parameters(f"{attr}."):
            if name not in stored:
                raise CheckpointError(f"checkpoint lacks parameter {part}/{name}")
            if stored[name].shape != p.data.shape:
                raise CheckpointError(f"{part}/{name}: shape {stored[name].shape} vs model {p.data.shape}")
            p.data[...] = stored[name]


def checkpoint_from(models: dict, optimizers: dict | None = None, epoch: int = 0, config=None, meta: dict | None = None) -> Checkpoint:
    """``models`` maps a label to any module with PARTITIONS (asr, tts, speaker)."""
    parts: dict = {}
    frozen: dict = {}
    for model in models.values():
        parts.update(model_partitions(model))
        frozen.update(frozen_flags(model))
    optim = {name: {k: np.asarray(v, dtype=np.float64) for k, v in opt.state_dict().items()} for name, opt in (optimizers or {}).items()}
    return Checkpoint(parts, frozen, optim, epoch, config_hash(config) if config is not None else "", dict(meta or {}))
