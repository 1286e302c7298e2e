import itertools

import numpy as np
import pytest

from speechchain import autodiff as ad
from speechchain.autodiff import Tensor, finite_diff_check
from speechchain.errors import ContractError, DomainError, ShapeError


def _away_from_zero(rng, shape):
    x = rng.uniform(0.3, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# name -> (builder(rng) -> inputs, f(*tensors) -> scalar)
PRIMITIVES = {
    "add": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(3,))], lambda a, b: (a + b).sum()),
    "sub": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 1))], lambda a, b: ((a - b) * (a - b)).sum()),
    "mul": (lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: (a * b).sum()),
    "div": (lambda r: [r.normal(size=(3,)), _away_from_zero(r, (3,))], lambda a, b: (a / b).sum()),
    "power": (lambda r: [r.uniform(0.5, 2.0, size=(4,))], lambda a: (a**2.5).sum()),
    "exp": (lambda r: [r.normal(size=(3,))], lambda a: ad.exp(a).sum()),
    "log": (lambda r: [r.uniform(0.5, 2.0, size=(3,))], lambda a: ad.log(a).sum()),
    "tanh": (lambda r: [r.normal(size=(3,))], lambda a: ad.tanh(a).sum()),
    "sigmoid": (lambda r: [r.normal(size=(3,))], lambda a: ad.sigmoid(a).sum()),
    "relu": (lambda r: [_away_from_zero(r, (5,))], lambda a: (ad.relu(a) * ad.relu(a)).sum()),
    "abs": (lambda r: [_away_from_zero(r, (5,))], lambda a: (ad.abs_(a) * a).sum()),
    "clamp_min": (lambda r: [_away_from_zero(r, (5,))], lambda a: (ad.clamp_min(a, 0.1) ** 2).sum()),
    "sum_axis": (lambda r: [r.normal(size=(2, 3))], lambda a: (a.sum(axis=0) ** 2).sum()),
    "mean": (lambda r: [r.normal(size=(2, 3))], lambda a: (a.mean(axis=1) ** 2).sum()),
    "matmul": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))], lambda a, b: ((a @ b) ** 2).sum()),
    "dot": (lambda r: [r.normal(size=(2, 4)), r.normal(size=(2, 4))], lambda a, b: (ad.dot(a, b) ** 2).sum()),
    "l2_norm": (lambda r: [r.normal(size=(2, 4))], lambda a: ad.l2_norm(a).sum()),
    "l1_distance": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 2)) + 3.0], lambda a, b: ad.l1_distance(a, b)),
    "sq_l2_distance": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 2))], lambda a, b: ad.sq_l2_distance(a, b)),
    "reshape_transpose": (lambda r: [r.normal(size=(2, 6))], lambda a: (a.reshape(3, 4).transpose() * np.arange(12.0).reshape(4, 3)).sum()),
    "getitem": (lambda r: [r.normal(size=(4, 3))], lambda a: (a[1:3, ::2] ** 2).sum()),
    "concat_stack": (lambda r: [r.normal(size=(2, 2)), r.normal(size=(1, 2))], lambda a, b: (ad.concat([a, b]) ** 3).sum() + ad.stack([a, a]).sum()),
    "pad_time": (lambda r: [r.normal(size=(1, 3, 2))], lambda a: (ad.pad_time(a, 1, 2) * np.arange(12.0).reshape(1, 6, 2)).sum()),
    "embedding": (lambda r: [r.normal(size=(5, 3))], lambda w: (ad.embedding(w, np.array([[0, 2, 2], [4, 1, 0]])) ** 2).sum()),
    "gather_rows": (lambda r: [r.normal(size=(2, 3, 2))], lambda a: (ad.gather_rows(a, np.array([[0, 0, 2], [1, 2, 2]])) ** 2).sum()),
    "softmax": (lambda r: [r.normal(size=(2, 4))], lambda a: (ad.softmax(a, np.array([True, True, False, True])) * np.arange(4.0)).sum()),
    "log_softmax": (lambda r: [r.normal(size=(2, 4))], lambda a: (ad.log_softmax(a) * np.arange(4.0)).sum()),
    "layer_norm": (lambda r: [r.normal(size=(2, 4)), r.normal(size=4), r.normal(size=4)], lambda a, g, b: (ad.layer_norm(a, g, b) * np.arange(8.0).reshape(2, 4)).sum()),
    "ctc_nll": (lambda r: [r.normal(size=(2, 5, 3))], lambda a: ad.ctc_nll(ad.log_softmax(a), [5, 4], [[1, 2], [2, 2]]).sum()),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_over_100_seeds(name):
    build, f = PRIMITIVES[name]
    for seed in range(100):
        inputs = [Tensor(x, requires_grad=True) for x in build(np.random.default_rng(seed))]
        res = finite_diff_check(f, inputs, tolerance=1e-4)
        assert res.passed, (name, seed, res)


def test_forward_examples():
    m = np.arange(6.0).reshape(2, 3)
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)
    assert np.allclose(ad.softmax(Tensor(np.zeros(4))).data, 0.25)
    x = np.random.default_rng(0).normal(size=(3, 2))
    assert ad.l1_distance(x, x).item() == 0.0


def test_softmax_sums_to_one_and_masks_exactly():
    rng = np.random.default_rng(1)
    mask = rng.random((5, 7)) > 0.3
    mask[:, 0] = True
    p = ad.softmax(Tensor(rng.normal(size=(5, 7)) * 10), mask).data
    assert np.all(np.abs(p.sum(-1) - 1) <= 1e-12)
    assert np.all(p[~mask] == 0.0)
    # a fully blocked row carries no weight at all
    assert np.array_equal(ad.softmax(Tensor(np.ones(3)), np.zeros(3, dtype=bool)).data, np.zeros(3))


def test_backward_examples():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)

    # differentiate through both operands
    b = Tensor(np.array([[0.3, -1.2, 2.0]]), requires_grad=True)
    cos = ad.dot(b, b) / (ad.l2_norm(b) * ad.l2_norm(b))
    cos.sum().backward()
    assert np.allclose(b.grad, 0.0, atol=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = Tensor(np.array([[0.7, -0.4]]), requires_grad=True)
    onehot = np.array([[0.0, 1.0]])
    loss = -(ad.log_softmax(z) * onehot).sum()
    loss.backward()
    p = np.exp(z.data) / np.exp(z.data).sum()
    assert np.allclose(z.grad, p - onehot, atol=1e-14)


def test_gradient_accumulates_on_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 2.0 + x * 3.0).sum().backward()
    assert np.array_equal(x.grad, [5.0, 5.0])


def test_backward_is_deterministic():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(4, 4))
    grads = []
    for _ in range(2):
        t = Tensor(w, requires_grad=True)
        ad.log_softmax(ad.tanh(t @ t)).sum().backward()
        grads.append(t.grad.tobytes())
    assert grads[0] == grads[1]


def test_errors():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))
    with pytest.raises(DomainError):
        ad.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(ShapeError):
        ad.softmax(Tensor(np.zeros(3)), np.ones(4, dtype=bool))
    with pytest.raises(ContractError):
        ad.backward(Tensor(np.zeros(2), requires_grad=True) * 2.0)
    with pytest.raises(ContractError):
        finite_diff_check(lambda a: a.sum(), [Tensor(np.ones(2), requires_grad=True)], epsilon=0.5)


def test_finite_diff_reports_rather_than_raises():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    res = finite_diff_check(lambda a: a.sum(), [x])
    assert res.passed and res.max_rel_error < 1e-9

    def wrong(a):
        out = a.sum()
        out._backward = lambda g: (np.full(a.shape, 2.0 * g),)
        return out

    res = finite_diff_check(wrong, [Tensor(np.ones(3), requires_grad=True)])
    assert not res.passed and res.max_rel_error > 0.4


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.exp(x) * 3.0
    assert not y.requires_grad and y._parents == ()


def test_ctc_matches_path_enumeration():
    rng = np.random.default_rng(5)
    for _ in range(20):
        t, v = 4, 3
        logits = rng.normal(size=(1, t, v))
        lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        y = rng.integers(1, v, size=rng.integers(1, 3)).tolist()
        total = 0.0
        for path in itertools.product(range(v), repeat=t):
            collapsed = [k for k, _ in itertools.groupby(path) if k != 0]
            if collapsed == y:
                total += np.exp(sum(lp[0, i, path[i]] for i in range(t)))
        assert ad.ctc_nll(lp, [t], [y]).data[0] == pytest.approx(-np.log(total), rel=1e-12)
