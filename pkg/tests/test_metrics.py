import itertools
import math

import numpy as np
import pytest
from scipy.fft import dct

from speechchain.errors import ContractError
from speechchain.metrics import (
    PerplexityCurve,
    cepstra,
    corpus_per,
    dtw,
    edit_distance,
    f0_rmse,
    mcd,
    per,
    perplexity_curve,
)


def brute_force_edits(ref, hyp):
    """Minimum over every edit script (keep/substitute, delete, insert) turning ref into hyp."""
    best = math.inf

    def walk(i, j, cost):
        nonlocal best
        if i == len(ref) and j == len(hyp):
            best = min(best, cost)
            return
        if i < len(ref) and j < len(hyp):
            walk(i + 1, j + 1, cost + (ref[i] != hyp[j]))
        if i < len(ref):
            walk(i + 1, j, cost + 1)
        if j < len(hyp):
            walk(i, j + 1, cost + 1)

    walk(0, 0, 0)
    return best


def all_monotone_paths(n, m):
    def extend(path):
        i, j = path[-1]
        if (i, j) == (n - 1, m - 1):
            yield list(path)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                path.append((i + di, j + dj))
                yield from extend(path)
                path.pop()

    yield from extend([(0, 0)])


def test_per_examples():
    assert per([4, 5, 6, 7], [4, 5, 6, 7]) == 0.0
    assert per([4, 5, 6, 7], [4, 9, 6, 7]) == 25.0
    assert per([4], []) == 100.0


def test_per_empty_reference():
    with pytest.raises(ContractError):
        per([], [4])


def test_per_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(300):
        ref = rng.integers(4, 7, size=rng.integers(1, 7)).tolist()
        hyp = rng.integers(4, 7, size=rng.integers(0, 7)).tolist()
        assert edit_distance(ref, hyp) == brute_force_edits(ref, hyp)


def test_corpus_per_pools_edits():
    assert corpus_per([[4, 5], [6, 7, 8, 9]], [[4, 5], [6, 7, 8, 4]]) == pytest.approx(100 / 6)


def test_dtw_identity_and_repetition():
    a = np.arange(6.0).reshape(3, 2)
    cost, path = dtw(a, a)
    assert cost == 0.0 and path == [(0, 0), (1, 1), (2, 2)]
    cost, path = dtw([[0.0]], [[0.0], [0.0], [0.0]])
    assert cost == 0.0 and path == [(0, 0), (0, 1), (0, 2)]


def test_dtw_matches_exhaustive_enumeration():
    rng = np.random.default_rng(3)
    for n, m in itertools.product(range(1, 6), repeat=2):
        a, b = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
        local = np.linalg.norm(a[:, None] - b[None], axis=-1)
        best = min(sum(local[i, j] for i, j in p) for p in all_monotone_paths(n, m))
        cost, path = dtw(a, b)
        assert cost == pytest.approx(best, abs=1e-12)
        assert sum(local[i, j] for i, j in path) == pytest.approx(cost, abs=1e-12)


def test_dtw_path_is_valid():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(4, 3))
    _, path = dtw(a, b)
    assert path[0] == (0, 0) and path[-1] == (6, 3)
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        assert (i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)}


def test_dtw_symmetric_cost():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 2)), rng.normal(size=(3, 2))
    assert dtw(a, b)[0] == pytest.approx(dtw(b, a)[0], abs=1e-12)


def test_dtw_custom_distance_and_empty():
    cost, _ = dtw([1.0, 2.0], [1.0, 4.0], frame_dist=lambda x, y: abs(x - y))
    assert cost == 2.0
    with pytest.raises(ContractError):
        dtw([], [[1.0]])


def test_mcd_zero_for_identical_and_gain():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.1, 1.0, size=(9, 16))
    assert mcd(x, x) == 0.0
    # a uniform gain only moves c0, which is excluded
    assert mcd(x, 2.5 * x) == pytest.approx(0.0, abs=1e-12)


def test_mcd_single_frame_hand_computed():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    y = np.array([[1.0, 1.0, 1.0, 1.0]])
    # orthonormal DCT-II written out by hand
    n = 4

    def coef(v, k):
        s = sum(math.log(v[i]) * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        return s * math.sqrt((1 if k == 0 else 2) / n)

    d2 = sum((coef(x[0], k) - coef(y[0], k)) ** 2 for k in range(1, 4))
    expected = 10 / math.log(10) * math.sqrt(2 * d2)
    assert mcd(x, y, order=3) == pytest.approx(expected, rel=1e-12)


def test_cepstra_floor_guards_nonpositive():
    c = cepstra(np.array([[0.0, -1.0, 1.0, 2.0]]), order=3)
    assert np.all(np.isfinite(c))
    assert np.allclose(dct(np.log([1e-5, 1e-5, 1.0, 2.0]), norm="ortho")[1:4], c[0])


def test_f0_rmse_offset_and_recomputation():
    rng = np.random.default_rng(4)
    x = rng.uniform(0.1, 1.0, size=(6, 16))
    assert f0_rmse(x, x) == 0.0
    y = x.copy()
    y[:, 0] += 0.3
    assert f0_rmse(x, y) == pytest.approx(0.3, abs=1e-12)

    z = rng.uniform(0.1, 1.0, size=(4, 16))
    local = np.linalg.norm(x[:, None] - z[None], axis=-1)
    path = min(all_monotone_paths(6, 4), key=lambda p: sum(local[i, j] for i, j in p))
    direct = math.sqrt(np.mean([(x[i, 0] - z[j, 0]) ** 2 for i, j in path]))
    assert f0_rmse(x, z) == pytest.approx(direct, rel=1e-12)


def test_perplexity_curve_first_crossing():
    curve = perplexity_curve([(2, 1.0), (0, 1.5), (1, 1.2)], baseline=1.1)
    assert curve.epochs == [0, 1, 2]
    assert curve.first_crossing() == 2
    assert PerplexityCurve([0, 1], [2.0, 2.0], 1.0).first_crossing() is None
