"""Adam / RAdam optimizers, early stopping and minibatch helpers."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


class Adam:
    """Adam over a fixed list of named parameters.  Only the listed parameters are ever touched."""

    rectified = False

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-9,
        max_grad_norm: float | None = None,
    ):
        self.params = list(params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ContractError("optimizer: duplicate parameter names")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in self.params if p.grad is not None))

    def _direction(self, m_hat: np.ndarray, v_hat: np.ndarray) -> np.ndarray:
        return m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data -= self.lr * self._direction(m_hat, v_hat)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array([self.step_count], dtype=np.float64)}
        for name, _ in self.params:
            state[f"m/{name}"] = self.m[name]
            state[f"v/{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])
        for name, _ in self.params:
            self.m[name] = state[f"m/{name}"].copy()
            self.v[name] = state[f"v/{name}"].copy()


class RAdam(Adam):
    """Rectified Adam: plain momentum SGD until the variance estimate is tractable."""

    rectified = True

    def step(self) -> None:
        t = self.step_count + 1
        rho_inf = 2.0 / (1.0 - self.beta2) - 1.0
        b2t = self.beta2**t
        self._rho = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
        self._rho_inf = rho_inf
        super().step()

    def _direction(self, m_hat, v_hat):
        rho, rho_inf = self._rho, self._rho_inf
        if rho <= 4.0:
            return m_hat
        r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
        return r * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, params, lr: float, max_grad_norm: float | None = None) -> Adam:
    kinds = {"adam": Adam, "radam": RAdam}
    if kind not in kinds:
        raise ContractError(f"unknown optimizer {kind!r}; expected one of {sorted(kinds)}")
    return kinds[kind](params, lr=lr, max_grad_norm=max_grad_norm)


class EarlyStopping:
    """Stop once the monitored value has failed to improve for ``patience`` consecutive evaluations."""

    def __init__(self, patience: int = 5, min_delta: float = 0.0):
        if patience < 1:
            raise ContractError("EarlyStopping: patience must be >= 1")
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0
        self.epoch = -1

    def update(self, value: float) -> bool:
        """Record one evaluation; return True when it is a new best."""
        self.epoch += 1
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def minibatches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True) -> list[np.ndarray]:
    order = rng.permutation(n) if shuffle else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def snapshot(params: Sequence[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def restore(params: Sequence[Tensor], saved: Sequence[np.ndarray]) -> None:
    for p, s in zip(params, saved):
        p.data[...] = s


def bucketed_batches(lengths, batch_size: int, rng: np.random.Generator, pool: int = 8) -> list[np.ndarray]:
    """Shuffled minibatches of similar-length items (sorted within pools of ``pool`` batches)."""
    lengths = np.asarray(lengths)
    order = rng.permutation(len(lengths))
    batches = []
    span = batch_size * pool
    for i in range(0, len(order), span):
        chunk = order[i : i + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[j : j + batch_size] for j in range(0, len(chunk), batch_size))
    return [batches[k] for k in rng.permutation(len(batches))]
