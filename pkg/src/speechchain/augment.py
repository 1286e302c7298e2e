"""SpecAugment-style time and frequency masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError


@dataclass(frozen=True)
class SpecAugmentPolicy:
    time_masks: int = 2
    time_width: int = 10
    freq_masks: int = 2
    freq_width: int = 5

    def __post_init__(self):
        if min(self.time_masks, self.time_width, self.freq_masks, self.freq_width) < 0:
            raise ContractError("SpecAugmentPolicy: counts and widths must be >= 0")


def mask_for(frames: int, channels: int, policy: SpecAugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """0/1 keep-mask of shape (frames, channels).

    Each mask width is drawn uniformly from [0, W] (W clamped to the extent),
    then its start uniformly among the positions where it fits.
    """
    keep = np.ones((frames, channels))
    for _ in range(policy.time_masks):
        w = int(rng.integers(0, min(policy.time_width, frames) + 1))
        start = int(rng.integers(0, frames - w + 1))
        keep[start : start + w, :] = 0.0
    for _ in range(policy.freq_masks):
        w = int(rng.integers(0, min(policy.freq_width, channels) + 1))
        start = int(rng.integers(0, channels - w + 1))
        keep[:, start : start + w] = 0.0
    return keep


def batch_mask(lengths, max_frames: int, channels: int, policy: SpecAugmentPolicy, rng) -> np.ndarray:
    out = np.ones((len(lengths), max_frames, channels))
    for i, n in enumerate(lengths):
        out[i, :n] = mask_for(int(n), channels, policy, rng)
    return out


def specaugment(features, policy: SpecAugmentPolicy, rng: np.random.Generator, lengths=None):
    """Mask a (T, F) array or a (B, T, F) array/Tensor; masked cells become 0, others are untouched."""
    data = features.data if isinstance(features, ad.Tensor) else np.asarray(features)
    if data.ndim == 2:
        keep = mask_for(data.shape[0], data.shape[1], policy, rng)
    else:
        lengths = np.full(data.shape[0], data.shape[1]) if lengths is None else lengths
        keep = batch_mask(lengths, data.shape[1], data.shape[2], policy, rng)
    if isinstance(features, ad.Tensor):
        return features * keep
    return np.where(keep > 0, data, 0.0)
