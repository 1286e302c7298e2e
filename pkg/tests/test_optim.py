import numpy as np
import pytest

from speechchain import autodiff as ad
from speechchain.autodiff import Tensor
from speechchain.errors import ContractError
from speechchain.optim import Adam, EarlyStopping, RAdam, bucketed_batches, make_optimizer, minibatches, restore, snapshot


def _quadratic(opt_cls, steps=300, **kw):
    x = ad.parameter(np.array([3.0, -2.0]))
    opt = opt_cls([("x", x)], lr=0.05, **kw)
    for _ in range(steps):
        opt.zero_grad()
        ((x - np.array([1.0, 1.0])) ** 2).sum().backward()
        opt.step()
    return x.data


@pytest.mark.parametrize("cls", [Adam, RAdam])
def test_minimizes_quadratic(cls):
    assert np.allclose(_quadratic(cls), [1.0, 1.0], atol=1e-2)


def test_first_adam_step_has_size_lr():
    x = ad.parameter(np.array([5.0]))
    opt = Adam([("x", x)], lr=0.1)
    (x * 3.0).sum().backward()
    opt.step()
    assert x.data[0] == pytest.approx(4.9, abs=1e-8)


def test_only_listed_parameters_move():
    a, b = ad.parameter(np.ones(2)), ad.parameter(np.ones(2))
    before = b.data.copy()
    opt = Adam([("a", a)], lr=0.1)
    (a * b).sum().backward()
    opt.step()
    assert np.array_equal(b.data, before) and not np.array_equal(a.data, np.ones(2))


def test_clipping_bounds_effective_gradient():
    x = ad.parameter(np.zeros(3))
    opt = Adam([("x", x)], lr=0.1, max_grad_norm=1.0)
    x.grad = np.array([300.0, 400.0, 0.0])
    assert opt.grad_norm() == pytest.approx(500.0)
    opt.step()
    assert np.allclose(opt.m["x"], 0.1 * np.array([0.6, 0.8, 0.0]))


def test_state_round_trip():
    x = ad.parameter(np.array([1.0, 2.0]))
    opt = Adam([("x", x)])
    (x**2).sum().backward()
    opt.step()
    other = Adam([("x", ad.parameter(np.zeros(2)))])
    other.load_state_dict(opt.state_dict())
    assert other.step_count == 1 and np.array_equal(other.m["x"], opt.m["x"])


def test_factory_and_duplicates():
    x = ad.parameter(np.zeros(1))
    assert isinstance(make_optimizer("radam", [("x", x)], 1e-3), RAdam)
    with pytest.raises(ContractError):
        make_optimizer("sgd", [("x", x)], 1e-3)
    with pytest.raises(ContractError):
        Adam([("x", x), ("x", x)])


def test_early_stopping_counts_non_improving_evals():
    s = EarlyStopping(patience=2)
    flags = [s.update(v) for v in [3.0, 2.0, 2.5, 2.0]]
    assert flags == [True, True, False, False] and s.should_stop and s.best_epoch == 1
    with pytest.raises(ContractError):
        EarlyStopping(0)


def test_batching_covers_every_index_once(rng):
    for batches in (minibatches(23, 5, rng), bucketed_batches(rng.integers(1, 50, size=23), 5, rng)):
        flat = np.concatenate(batches)
        assert sorted(flat.tolist()) == list(range(23))


def test_snapshot_restore(rng):
    p = Tensor(rng.normal(size=3))
    saved = snapshot([p])
    p.data += 1.0
    restore([p], saved)
    assert np.array_equal(p.data, saved[0])
