"""Evaluation metrics: PER, DTW alignment, MCD, F0 RMSE and perplexity curves."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.fft import dct

from .corpus import F0_CHANNEL
from .errors import ContractError

MCD_ORDER = 8
LOG_FLOOR = 1e-5


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def per(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    """Phoneme error rate in percent."""
    if len(reference) == 0:
        raise ContractError("per: reference must be non-empty")
    return 100.0 * edit_distance(reference, hypothesis) / len(reference)


def corpus_per(references, hypotheses) -> float:
    """Total edits over total reference length, in percent."""
    if len(references) != len(hypotheses):
        raise ContractError("corpus_per: reference/hypothesis count mismatch")
    edits = sum(edit_distance(r, h) for r, h in zip(references, hypotheses))
    total = sum(len(r) for r in references)
    if total == 0:
        raise ContractError("corpus_per: empty references")
    return 100.0 * edits / total


def euclidean(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


def dtw(a, b, frame_dist: Callable | None = None) -> tuple[float, list[tuple[int, int]]]:
    """Minimum-cost monotone alignment with steps (1,0), (0,1), (1,1).

    Ties prefer the diagonal predecessor, then (i-1, j), then (i, j-1).
    """
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ContractError("dtw: both sequences must be non-empty")
    if frame_dist is None:
        a2 = np.asarray(a, dtype=np.float64).reshape(n, -1)
        b2 = np.asarray(b, dtype=np.float64).reshape(m, -1)
        local = np.sqrt(((a2[:, None, :] - b2[None, :, :]) ** 2).sum(-1))
    else:
        local = np.array([[frame_dist(x, y) for y in b] for x in a], dtype=np.float64)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, up = acc[i], acc[i - 1]
        for j in range(1, m + 1):
            row[j] = local[i - 1, j - 1] + min(up[j - 1], up[j], row[j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        options = [(acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1)]
        best = min(c for c, _, _ in options)
        _, i, j = next(o for o in options if o[0] == best)
        path.append((i - 1, j - 1))
    return float(acc[n, m]), path[::-1]


def cepstra(features: np.ndarray, order: int = MCD_ORDER, floor: float = LOG_FLOOR) -> np.ndarray:
    """Orthonormal DCT-II of log features along channels; coefficients 1..order (c0 dropped)."""
    logs = np.log(np.maximum(np.asarray(features, dtype=np.float64), floor))
    c = dct(logs, type=2, norm="ortho", axis=-1)
    return c[..., 1 : order + 1]


def mcd(x: np.ndarray, x_hat: np.ndarray, order: int = MCD_ORDER) -> float:
    """Mel-cepstral-style distortion in dB, averaged along the DTW path on the cepstra."""
    x, x_hat = np.atleast_2d(x), np.atleast_2d(x_hat)
    if x.shape[-1] != x_hat.shape[-1]:
        raise ContractError(f"mcd: feature dims differ ({x.shape[-1]} vs {x_hat.shape[-1]})")
    c, c_hat = cepstra(x, order), cepstra(x_hat, order)
    _, path = dtw(c, c_hat)
    ii, jj = np.array(path).T
    diff = c[ii] - c_hat[jj]
    return float(np.mean(10.0 / math.log(10.0) * np.sqrt(2.0 * (diff**2).sum(-1))))


def f0_rmse(x: np.ndarray, x_hat: np.ndarray, channel: int = F0_CHANNEL) -> float:
    """RMSE of the F0 channel along the DTW path computed on the full features."""
    x, x_hat = np.atleast_2d(x), np.atleast_2d(x_hat)
    _, path = dtw(x, x_hat)
    ii, jj = np.array(path).T
    return float(np.sqrt(np.mean((x[ii, channel] - x_hat[jj, channel]) ** 2)))


@dataclass
class MetricsReport:
    per_percent: float
    mcd_db: float
    f0_rmse: float
    perplexity: float = float("nan")
    mcd_db_other_speaker: float = float("nan")
    f0_rmse_other_speaker: float = float("nan")
    counts: dict = field(default_factory=dict)
    config_hash: str = ""

    def __post_init__(self):
        if self.per_percent < 0 or self.mcd_db < 0:
            raise ContractError("MetricsReport: PER and MCD must be non-negative")

    def as_dict(self) -> dict:
        return asdict(self)

    def table_row(self, method: str) -> str:
        return f"| {method} | {self.per_percent:.1f} | {self.mcd_db:.2f} | {self.f0_rmse:.3f} |"


TABLE_HEADER = "| Method | PER (%) | MCD (dB) | F0 RMSE |\n|---|---|---|---|"


@dataclass
class PerplexityCurve:
    epochs: list[float]
    values: list[float]
    baseline: float

    def first_crossing(self) -> float | None:
        """First epoch whose perplexity is strictly below the human-speech baseline."""
        for e, v in zip(self.epochs, self.values):
            if v < self.baseline:
                return e
        return None


def perplexity_curve(points: Sequence[tuple[float, float]], baseline: float) -> PerplexityCurve:
    points = sorted(points)
    return PerplexityCurve([e for e, _ in points], [float(v) for _, v in points], float(baseline))
