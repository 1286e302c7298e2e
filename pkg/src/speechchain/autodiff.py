"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive builds its output eagerly and, when any operand requires a
gradient, records its parents and a backward rule on the output.  Calling
:func:`backward` on a scalar walks the recorded graph once in reverse
topological order and accumulates into ``.grad`` of the leaves.

Broadcasting follows numpy rules for the elementwise ops and for the batch
dimensions of :func:`matmul`; gradients are summed back down to each
operand's shape.  Incompatible shapes raise :class:`ShapeError` carrying both
shapes.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ------------------------------------------------------------ elementwise ops
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if exponent < 1 and np.any(a.data <= 0):
        raise DomainError(f"power: exponent {exponent} needs positive base")
    out = a.data**exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


# ----------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ContractError("mean: empty reduction")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "mean")


# ------------------------------------------------------------ linear algebra
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def dot(a, b, axis: int = -1) -> Tensor:
    """Inner product along ``axis``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    return sum_(mul(a, b), axis=axis)


def l2_norm(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def bw(g):
        o = np.expand_dims(out, axis)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, a.data / safe, 0.0) * np.expand_dims(g, axis),)

    return _make(out, (a,), bw, "l2_norm")


def l1_distance(a, b) -> Tensor:
    """Sum of absolute differences, i.e. the entrywise L1 norm of ``a - b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("l1_distance", a.shape, b.shape)
    return sum_(abs_(sub(a, b)))


def sq_l2_distance(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sq_l2_distance", a.shape, b.shape)
    d = sub(a, b)
    return sum_(mul(d, d))


# ------------------------------------------------------------------- shaping
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, slice, np.integer)) for k in items)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]
    basic = _is_basic_index(key)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw, "slice")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


def pad_time(a, before: int, after: int, axis: int = 1) -> Tensor:
    """Zero-pad ``a`` along ``axis``."""
    a = as_tensor(a)
    pads = [(0, 0)] * a.ndim
    pads[axis] = (before, after)
    n = a.shape[axis]
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + n)
    sl = tuple(sl)
    return _make(np.pad(a.data, pads), (a,), lambda g: (g[sl],), "pad")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradient is scattered into a dense table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(f"embedding: id out of range for table of {weight.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(weight.data[ids], (weight,), bw, "embedding")


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Batched row gather: ``out[b, t] = a[b, index[b, t]]`` for ``a`` of shape (B, L, D)."""
    index = np.asarray(index)
    if a.ndim != 3 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ShapeError("gather_rows", a.shape, index.shape)
    batch = np.arange(a.shape[0])[:, None]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (np.broadcast_to(batch, index.shape), index), g)
        return (full,)

    return _make(a.data[batch, index], (a,), bw, "gather_rows")


# ------------------------------------------------------- softmax and friends
def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (True = keep) gives blocked entries exactly zero weight.

    Rows whose entries are all blocked come out as all-zero.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            mask = np.broadcast_to(mask, x.shape)
        except ValueError:
            raise ShapeError("softmax mask", a.shape, mask.shape) from None
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable log-softmax over the last axis (log-sum-exp shifted)."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise DomainError("log_softmax: a row has every entry masked")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        gg = np.where(np.isfinite(out), g, 0.0)
        return (gg - probs * gg.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(a, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    a = as_tensor(a)
    n = a.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError("layer_norm", a.shape, gamma.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if a.requires_grad:
            gxh = g * gamma.data
            gx = inv / n * (n * gxh - gxh.sum(axis=-1, keepdims=True) - xhat * (gxh * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (a, gamma, beta), bw, "layer_norm")


def _lse3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def ctc_nll(log_probs, lengths, targets: Sequence[Sequence[int]], blank: int = 0) -> Tensor:
    """Per-utterance CTC negative log-likelihood, shape (B,).

    ``log_probs`` is (B, T, V) and already log-normalized.  Alignments that
    cannot fit in the available frames give a loss (and gradient) of zero.
    """
    lp = as_tensor(log_probs)
    x = lp.data
    b, t_max, _ = x.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    s_max = 2 * max(len(y) for y in targets) + 1
    ext = np.full((b, s_max), blank, dtype=np.int64)
    n_states = np.zeros(b, dtype=np.int64)
    for i, y in enumerate(targets):
        ext[i, 1 : 2 * len(y) : 2] = y
        n_states[i] = 2 * len(y) + 1
    states = np.arange(s_max)
    live = states[None, :] < n_states[:, None]
    skip = np.zeros((b, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    emit = np.take_along_axis(x, np.broadcast_to(ext[:, None, :], (b, t_max, s_max)), axis=2)
    emit = np.where(live[:, None, :], emit, -np.inf)
    neg = np.full((b, s_max), -np.inf)
    rows = np.arange(b)

    alpha = np.full((b, t_max, s_max), -np.inf)
    alpha[:, 0, :2] = emit[:, 0, :2]
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        one = np.concatenate([neg[:, :1], prev[:, :-1]], axis=1)
        two = np.where(skip, np.concatenate([neg[:, :2], prev[:, :-2]], axis=1), -np.inf)
        alpha[:, t] = np.where((t < lengths)[:, None], _lse3(prev, one, two) + emit[:, t], prev)

    last = lengths - 1
    end = alpha[rows, last]
    logp = np.logaddexp(end[rows, n_states - 1], np.where(n_states >= 2, end[rows, np.maximum(n_states - 2, 0)], -np.inf))
    feasible = np.isfinite(logp)

    beta = np.full((b, t_max, s_max), -np.inf)
    skip_next = np.concatenate([skip[:, 2:], np.zeros((b, 2), dtype=bool)], axis=1)
    init = np.where((states[None, :] >= n_states[:, None] - 2) & live, 0.0, -np.inf)
    for t in range(t_max - 1, -1, -1):
        if t == t_max - 1:
            rec = neg
        else:
            nxt = beta[:, t + 1]
            one = np.concatenate([nxt[:, 1:], neg[:, :1]], axis=1)
            two = np.where(skip_next, np.concatenate([nxt[:, 2:], neg[:, :2]], axis=1), -np.inf)
            rec = _lse3(nxt, one, two)
        here = np.where((t == last)[:, None], init, np.where((t < last)[:, None], rec, -np.inf))
        beta[:, t] = here + emit[:, t]

    out = np.where(feasible, -logp, 0.0)

    def bw(g):
        with np.errstate(invalid="ignore"):
            occ = alpha + beta - emit - np.where(feasible, logp, 0.0)[:, None, None]
            gamma = np.where(np.isfinite(occ) & feasible[:, None, None], np.exp(occ), 0.0)
        grad = np.zeros_like(x)
        bi = np.broadcast_to(rows[:, None, None], gamma.shape)
        ti = np.broadcast_to(np.arange(t_max)[None, :, None], gamma.shape)
        si = np.broadcast_to(ext[:, None, :], gamma.shape)
        np.add.at(grad, (bi, ti, si), gamma)
        return (-grad * g[:, None, None],)

    return _make(out, (lp,), bw, "ctc_nll")


# ------------------------------------------------------------------ backward
def trace(root: Tensor) -> list[Tensor]:
    """Return the computation record below ``root``: every gradient-carrying node, parents first."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf that requires grad."""
    if root.size != 1:
        raise ContractError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = trace(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ------------------------------------------------------- gradient checking
@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst: tuple[int, int] | None  # (input position, flat coordinate)
    checked: int

    def __bool__(self) -> bool:
        return self.passed


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    atol: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare backward() against central differences of ``f(*inputs)``.

    The relative error at a coordinate is ``|a - n| / max(|a|, |n|, atol)``, so
    coordinates whose true derivative is ~0 are judged on an absolute scale.
    ``max_coords`` limits the number of coordinates probed per input (chosen
    with a seeded rng).  Disagreement is reported, never raised.
    """
    if not 0 < epsilon <= 1e-2:
        raise ContractError("finite_diff_check: epsilon must lie in (0, 1e-2]")
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ContractError("finite_diff_check: f must be scalar-valued")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None

    rng = np.random.default_rng(seed)
    worst, worst_at, checked = 0.0, None, 0
    with no_grad():
        for pos, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for c in coords:
                orig = flat[c]
                flat[c] = orig + epsilon
                up = f(*inputs).item()
                flat[c] = orig - epsilon
                down = f(*inputs).item()
                flat[c] = orig
                numeric = (up - down) / (2 * epsilon)
                a = analytic[pos].reshape(-1)[c]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), atol)
                checked += 1
                if rel > worst or not np.isfinite(rel):
                    worst, worst_at = rel, (pos, int(c))
    return GradCheckResult(bool(worst < tolerance), float(worst), worst_at, checked)
