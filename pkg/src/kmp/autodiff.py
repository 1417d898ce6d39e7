"""Dense-matrix reverse-mode autodiff on top of numpy, plus Adam.

Every value is a 2-D float64 array; scalars are 1x1. Operations record their
parents and a backward closure, and :func:`backward` walks the recorded graph
in reverse topological order, summing gradients where subexpressions are
shared. Sparse scipy matrices enter only as constants through :func:`spmm`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording anything (inference, teacher snapshots)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return power(self, k)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _record(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    live = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = live
    if live:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _record(a.value * b.value, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.value / b.value

    def bw(g):
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        )

    return _record(out, (a, b), bw)


def power(a: Tensor, k: float) -> Tensor:
    out = a.value**k

    def bw(g):
        return (g * k * a.value ** (k - 1),)

    return _record(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * g * a.value,)

    return _record(a.value * a.value, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.value), (a,), lambda g: (g / a.value,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.value > floor
    return _record(np.where(mask, a.value, floor), (a,), lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _record(a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.value)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
}


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not chain")

    def bw(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    return _record(a.value @ b.value, (a, b), bw)


def spmm(s: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times tensor; only ``x`` can carry gradient."""
    if s.shape[1] != x.rows:
        raise DimensionError(f"spmm: shapes {s.shape} and {x.shape} do not chain")
    st = s.T.tocsr()

    def bw(g):
        return (np.asarray(st @ g),)

    return _record(np.asarray(s @ x.value), (x,), bw)


def transpose(a: Tensor) -> Tensor:
    return _record(a.value.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    n = parts[0].rows
    for p in parts[1:]:
        if p.rows != n:
            raise DimensionError(
                f"concat_cols: row counts differ, shapes {parts[0].shape} and {p.shape}"
            )
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.value for p in parts], axis=1), parts, bw)


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.value[idx], (a,), bw)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.value)
        full[lo:hi] = g
        return (full,)

    return _record(a.value[lo:hi].copy(), (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    return _record(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    size = a.value.size
    return _record(
        np.array([[a.value.mean()]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / size),)
    )


def sum_rows(a: Tensor) -> Tensor:
    """Row sums as an n x 1 column."""
    return _record(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record(out, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=1, keepdims=True),)

    return _record(out, (a,), bw)


def nll(log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row log-probs."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != log_probs.rows:
        raise DimensionError(f"nll: {log_probs.shape} rows vs {labels.shape} labels")
    rows = np.arange(labels.shape[0])
    n = max(len(labels), 1)

    def bw(g):
        full = np.zeros_like(log_probs.value)
        full[rows, labels] = -g[0, 0] / n
        return (full,)

    return _record(np.array([[-log_probs.value[rows, labels].mean()]]), (log_probs,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return nll(log_softmax(logits), labels)


def kl_rows(p: np.ndarray, log_q: Tensor) -> Tensor:
    """Mean over rows of sum_i p_i (log p_i - log q_i); ``p`` is a constant."""
    p = np.asarray(p, dtype=DTYPE)
    if p.shape != log_q.shape:
        raise DimensionError(f"kl_rows: shapes {p.shape} and {log_q.shape} differ")
    n = max(p.shape[0], 1)
    with np.errstate(divide="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    val = (plogp - p * log_q.value).sum() / n

    def bw(g):
        return (-g[0, 0] * p / n,)

    return _record(np.array([[val]]), (log_q,), bw)


# ---------------------------------------------------------------------------
# kernel helpers


def gram(a: Tensor) -> Tensor:
    """Symmetric Gram matrix ``a a^T`` (exactly symmetric)."""
    g0 = a.value @ a.value.T
    out = 0.5 * (g0 + g0.T)

    def bw(g):
        return ((g + g.T) @ a.value,)

    return _record(out, (a,), bw)


def pairwise_sqdist(a: Tensor) -> Tensor:
    """Squared Euclidean distances between rows; zero diagonal, exactly symmetric."""
    x = a.value
    sq = (x * x).sum(axis=1)
    g0 = x @ x.T
    d = sq[:, None] + sq[None, :] - g0 - g0.T
    d = 0.5 * (d + d.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)

    def bw(g):
        s = g + g.T
        return (2.0 * (s.sum(axis=1, keepdims=True) * x - s @ x),)

    return _record(d, (a,), bw)


# ---------------------------------------------------------------------------
# regularisation layers


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return a
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    keep = 1.0 - p
    mask = (rng.random(a.shape) < keep) / keep
    return _record(a.value * mask, (a,), lambda g: (g * mask,))


def sparse_dropout(s: sp.csr_matrix, p: float, rng: np.random.Generator, training: bool) -> sp.csr_matrix:
    """Inverted dropout applied to the stored entries of a constant sparse matrix."""
    if not training or p <= 0.0:
        return s
    out = s.copy()
    keep = 1.0 - p
    out.data = out.data * ((rng.random(out.data.shape[0]) < keep) / keep)
    return out


class BatchNormState:
    """Running statistics for one batch-norm layer (momentum as in torch)."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros((1, dim))
        self.running_var = np.ones((1, dim))
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    if x.cols != gamma.cols or x.cols != beta.cols:
        raise DimensionError(f"batch_norm: input {x.shape} vs affine {gamma.shape}/{beta.shape}")
    eps = state.eps
    if not training:
        scale = gamma.value / np.sqrt(state.running_var + eps)
        xhat = (x.value - state.running_mean) / np.sqrt(state.running_var + eps)

        def bw_eval(g):
            return g * scale, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

        return _record(xhat * gamma.value + beta.value, (x, gamma, beta), bw_eval)

    n = x.rows
    mu = x.value.mean(axis=0, keepdims=True)
    var = x.value.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    if _grad_enabled():
        m = state.momentum
        unbiased = var * n / max(n - 1, 1)
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * unbiased

    def bw(g):
        gx_hat = g * gamma.value
        gx = inv * (gx_hat - gx_hat.mean(axis=0, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=0, keepdims=True))
        return gx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _record(xhat * gamma.value + beta.value, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Returns a map from leaf tensor to its gradient. Leaf gradients accumulate
    across calls until :meth:`Tensor.zero_grad`.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    buffers: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = buffers.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in buffers:
                buffers[key] = buffers[key] + pg
            else:
                buffers[key] = pg
    return leaves


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with bias correction.

    Weight decay is decoupled (``p -= lr * wd * p`` beside the Adam step) by
    default; ``l2_coupled=True`` instead adds ``wd * p`` to the gradient
    before the moment updates.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        l2_coupled: bool = False,
    ):
        self.params = list(params)
        self.l2_coupled = l2_coupled
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise DimensionError(f"adam: {len(grads)} gradients for {len(self.params)} params")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                g = np.zeros_like(p.value)
            elif g.shape != p.value.shape:
                raise DimensionError(f"adam: gradient {g.shape} for parameter {p.value.shape}")
            if self.l2_coupled and self.weight_decay > 0:
                g = g + self.weight_decay * p.value
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            if self.weight_decay > 0 and not self.l2_coupled:
                p.value -= self.lr * self.weight_decay * p.value
            p.value -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
