"""Transformer building blocks on top of :mod:`speechchain.autodiff`.

Blocks are pre-norm residual: ``x + sublayer(layer_norm(x))``.  Batched
tensors are (batch, time, dim); padding is described by boolean masks where
True marks a real position.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


class Module:
    """Minimal parameter container.  Parameters and submodules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.op == "leaf":
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None


@dataclass(frozen=True)
class BlockConfig:
    model_dim: int = 64
    head_count: int = 2
    ff_dim: int = 128
    layer_count: int = 2

    def __post_init__(self):
        if min(self.model_dim, self.head_count, self.ff_dim, self.layer_count) < 1:
            raise ContractError("BlockConfig: all sizes must be positive")
        if self.model_dim % self.head_count:
            raise ContractError(f"BlockConfig: model_dim {self.model_dim} not divisible by head_count {self.head_count}")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float | None = None):
        bound = (1.0 / np.sqrt(n_in)) if scale is None else scale
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = ad.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = ad.parameter(np.ones(dim))
        self.beta = ad.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, dim: int, ff_dim: int, rng: np.random.Generator):
        self.inner = Linear(dim, ff_dim, rng)
        self.outer = Linear(ff_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ad.relu(self.inner(x)))


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoid table: even columns sin(t / 10000^(2i/dim)), odd columns the matching cos."""
    if length < 1 or dim < 1:
        raise ContractError("positional_encoding: length and dim must be >= 1")
    if dim % 2:
        raise ContractError(f"positional_encoding: dim must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def lengths_to_mask(lengths, max_len: int | None = None) -> np.ndarray:
    lengths = np.asarray(lengths)
    max_len = int(lengths.max()) if max_len is None else max_len
    return np.arange(max_len)[None, :] < lengths[:, None]


def attention_mask(key_mask: np.ndarray, query_len: int, causal: bool = False) -> np.ndarray:
    """(B, 1, Tq, Tk) keep-mask from a (B, Tk) key padding mask."""
    mask = np.broadcast_to(key_mask[:, None, None, :], (key_mask.shape[0], 1, query_len, key_mask.shape[1]))
    if causal:
        mask = mask & np.tril(np.ones((query_len, key_mask.shape[1]), dtype=bool))[None, None]
    return mask


class MultiHeadAttention(Module):
    def __init__(self, config: BlockConfig, rng: np.random.Generator):
        d = config.model_dim
        self._heads = config.head_count
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self._last_weights: np.ndarray | None = None
        # when set, the differentiable weights of the next call are kept in _weights_tensor
        self._record = False
        self._weights_tensor: Tensor | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self._heads, d // self._heads).transpose(0, 2, 1, 3)

    def project_kv(self, keys: Tensor, values: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.key(keys)), self._split(self.value(values))

    def attend(self, queries: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
        """Attention against keys/values already projected and split into heads."""
        b, tq, d = queries.shape
        q = self._split(self.query(queries))
        weights = ad.softmax((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // self._heads)), mask)
        return self.out((weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d))

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray | None) -> Tensor:
        b, tq, d = queries.shape
        tk = keys.shape[1]
        if keys.shape != values.shape or keys.shape[-1] != d:
            raise ShapeError("multi_head_attention", queries.shape, keys.shape, values.shape)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim != 4 or mask.shape[0] not in (1, b) or mask.shape[1] not in (1, self._heads) or mask.shape[2:] != (tq, tk):
                raise ContractError(f"multi_head_attention: mask shape {mask.shape} does not match ({b}, ., {tq}, {tk})")
        q = self._split(self.query(queries))
        k = self._split(self.key(keys))
        v = self._split(self.value(values))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // self._heads))
        weights = ad.softmax(scores, mask)
        self._last_weights = weights.data
        if self._record:
            self._weights_tensor = weights
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self.out(ctx)


def multi_head_attention(attn: MultiHeadAttention, queries, keys, values, mask) -> Tensor:
    return attn(queries, keys, values, mask)


class EncoderBlock(Module):
    def __init__(self, config: BlockConfig, rng: np.random.Generator):
        self.norm_attn = LayerNorm(config.model_dim)
        self.attn = MultiHeadAttention(config, rng)
        self.norm_ff = LayerNorm(config.model_dim)
        self.ff = FeedForward(config.model_dim, config.ff_dim, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h, mask)
        return x + self.ff(self.norm_ff(x))


class DecoderBlock(Module):
    def __init__(self, config: BlockConfig, rng: np.random.Generator):
        self.norm_self = LayerNorm(config.model_dim)
        self.self_attn = MultiHeadAttention(config, rng)
        self.norm_cross = LayerNorm(config.model_dim)
        self.cross_attn = MultiHeadAttention(config, rng)
        self.norm_ff = LayerNorm(config.model_dim)
        self.ff = FeedForward(config.model_dim, config.ff_dim, rng)

    def __call__(self, x: Tensor, memory: Tensor, self_mask: np.ndarray | None, cross_mask: np.ndarray | None) -> Tensor:
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, h, self_mask)
        x = x + self.cross_attn(self.norm_cross(x), memory, memory, cross_mask)
        return x + self.ff(self.norm_ff(x))

    def step(self, x: Tensor, cache: dict, memory_kv: tuple[Tensor, Tensor], cross_mask: np.ndarray | None) -> Tensor:
        """Advance one position (x is (B, 1, D)) reusing cached self-attention keys/values.

        Inference only: matches ``__call__`` with a causal mask on the last position.
        """
        h = self.norm_self(x)
        k, v = self.self_attn.project_kv(h, h)
        if "k" in cache:
            k = ad.concat([cache["k"], k], axis=2)
            v = ad.concat([cache["v"], v], axis=2)
        cache["k"], cache["v"] = k, v
        x = x + self.self_attn.attend(h, k, v, None)
        x = x + self.cross_attn.attend(self.norm_cross(x), memory_kv[0], memory_kv[1], cross_mask)
        return x + self.ff(self.norm_ff(x))


class Conv1d(Module):
    """Same-padded 1-D convolution over the time axis of a (B, T, C) tensor."""

    def __init__(self, n_in: int, n_out: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 == 0:
            raise ContractError("Conv1d: kernel size must be odd")
        self._kernel = kernel
        self.proj = Linear(n_in * kernel, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        half = self._kernel // 2
        t = x.shape[1]
        padded = ad.pad_time(x, half, half, axis=1)
        taps = [padded[:, i : i + t, :] for i in range(self._kernel)]
        return self.proj(ad.concat(taps, axis=-1))


def expand_index(durations: np.ndarray, lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gather index and frame counts for the length regulator.

    ``durations`` is (B, L) integer; entries past each ``lengths[b]`` are ignored.
    Returns ``index`` (B, Tmax) with the source phoneme of every frame (0 for
    padded frames) and ``frames`` (B,) with the total frame count per item.
    """
    durations = np.asarray(durations)
    b = durations.shape[0]
    valid = lengths_to_mask(lengths, durations.shape[1])
    reps = np.where(valid, durations, 0).astype(np.int64)
    frames = reps.sum(axis=1)
    index = np.zeros((b, max(int(frames.max()), 1)), dtype=np.int64)
    for i in range(b):
        index[i, : frames[i]] = np.repeat(np.arange(durations.shape[1]), reps[i])
    return index, frames


def length_regulate(states: Tensor, durations: np.ndarray, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Batched length regulator: (B, L, D) phoneme states -> (B, Tmax, D) frames, with frame counts."""
    durations = np.asarray(durations)
    valid = lengths_to_mask(lengths, durations.shape[1])
    if np.any(durations[valid] < 1):
        raise ContractError("length_regulator: durations must be >= 1")
    index, frames = expand_index(durations, lengths)
    out = ad.gather_rows(states, index)
    keep = lengths_to_mask(frames, index.shape[1])[:, :, None]
    return out * keep, frames


def length_regulator(phoneme_states: Tensor, durations) -> Tensor:
    """Repeat row i of an (L, D) tensor ``durations[i]`` times, preserving order."""
    if phoneme_states.ndim != 2 or phoneme_states.shape[0] == 0:
        raise ContractError("length_regulator: expected a non-empty (L, D) input")
    durations = np.asarray(durations, dtype=np.int64)
    if durations.shape != (phoneme_states.shape[0],):
        raise ShapeError("length_regulator", phoneme_states.shape, durations.shape)
    out, _ = length_regulate(phoneme_states.reshape(1, *phoneme_states.shape), durations[None], np.array([len(durations)]))
    return out.reshape(out.shape[1], out.shape[2])


def clamp_durations(predicted: np.ndarray) -> np.ndarray:
    """Round predicted durations to the nearest integer and clamp to >= 1."""
    return np.maximum(np.rint(predicted), 1).astype(np.int64)


def pad_sequences(seqs, pad_value: float = 0.0, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length arrays along a new batch axis, padding the first axis."""
    if not seqs:
        raise ContractError("pad_sequences: empty batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    first = np.asarray(seqs[0])
    out = np.full((len(seqs), int(lengths.max()), *first.shape[1:]), pad_value, dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths
