"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor stores a numpy float64 array. Operations build a per-forward
graph of parent pointers and vector-Jacobian closures; ``backward`` walks
the graph once in reverse topological order, accumulates gradients into
every participating tensor, and releases the graph. All math is
single-threaded numpy, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, DimensionError, NumericError

Array = np.ndarray

EPS_KL = 1e-8
EPS_NORM = 1e-12
EPS_LN = 1e-6

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus an optional gradient slot and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm) -> "Tensor":
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, linking it into the graph only when needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._vjp = vjp
        return out
    return Tensor(data)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient over the axes that numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    """Natural logarithm. The input must be strictly positive."""
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, (a,), vjp)


# -- shape manipulation ---------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), vjp)


def transpose(a: Tensor, perm: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(perm))
    out = a.data.transpose(perm)

    def vjp(g):
        return (g.transpose(inv),)

    return _node(out, (a,), vjp)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _node(out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(parts), vjp)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(a.data, shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _node(out, (a,), vjp)


# -- reductions -----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp)


def mean_pool(a: Tensor, axis: int) -> Tensor:
    """Average over one axis (token pooling)."""
    return tmean(a, axis=axis)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.shape} vs {b.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


# -- neural-network primitives ----------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically safe softmax along one axis.

    Shifts by the axis maximum before exponentiation, so inputs with
    magnitude up to about 1e4 stay finite. Non-finite input is rejected.
    """
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input contains NaN or Inf")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), vjp)


def layer_norm(a: Tensor, eps: float = EPS_LN) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (pre-affine).

    A constant vector normalizes to zeros; the eps inside the square root
    keeps that case finite.
    """
    mu = a.data.mean(axis=-1, keepdims=True)
    d = a.data - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, (a,), vjp)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear activation, x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + _erf(a.data / _SQRT2))
    out = a.data * phi_cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (phi_cdf + a.data * pdf),)

    return _node(out, (a,), vjp)


def l2_normalize(a: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm.

    Rows with norm below eps are divided by eps instead, which keeps the
    map finite and linear near zero.
    """
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom
    big = norm > eps

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        g_big = (g - out * inner) / denom
        g_small = g / eps
        return (np.where(big, g_big, g_small),)

    return _node(out, (a,), vjp)


def kl_divergence(p: Tensor, q: Tensor, eps: float = EPS_KL) -> Tensor:
    """KL(p || q) along the last axis, with q clamped below by eps.

    Terms with p == 0 contribute zero. The row result is floored at zero:
    the clamp on q can otherwise push a vanishing KL a few 1e-12 negative.
    Gradients are zero on floored rows and on clamped q entries.
    """
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    q_safe = np.maximum(q.data, eps)
    pos = p.data > 0.0
    logp = np.log(np.where(pos, p.data, 1.0))
    terms = np.where(pos, p.data * (logp - np.log(q_safe)), 0.0)
    raw = terms.sum(axis=-1)
    out = np.maximum(raw, 0.0)
    active = raw > 0.0

    def vjp(g):
        g = np.asarray(g)[..., None] * active[..., None]
        gp = np.where(pos, logp - np.log(q_safe) + 1.0, 0.0) * g
        gq = np.where(q.data > eps, -p.data / q_safe, 0.0) * g
        return gp, gq

    return _node(out, (p, q), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Negative log-likelihood of integer labels under softmax(logits).

    ``logits`` has classes on the last axis; ``labels`` is an int (for a
    single vector) or an int array matching the leading shape. Returns one
    loss per row, a scalar for a plain vector.
    """
    lab = np.asarray(labels, dtype=np.int64)
    lead = logits.shape[:-1]
    n_classes = logits.shape[-1]
    if lab.shape != lead:
        raise DimensionError(
            f"labels shape {lab.shape} does not match logits leading shape {lead}"
        )
    if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
        bad = lab.min() if lab.min() < 0 else lab.max()
        raise IndexError(f"label {int(bad)} out of range for {n_classes} classes")

    flat = logits.data.reshape(-1, n_classes)
    flat_lab = lab.reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(z)).reshape(-1)
    picked = flat[np.arange(flat.shape[0]), flat_lab]
    out = (lse - picked).reshape(lead)

    def vjp(g):
        soft = e / z
        grad = soft.copy()
        grad[np.arange(flat.shape[0]), flat_lab] -= 1.0
        grad *= np.asarray(g).reshape(-1, 1)
        return (grad.reshape(logits.shape),)

    return _node(out, (logits,), vjp)


# -- backward pass ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates ``grad`` on every requires-grad tensor reachable from the
    loss (accumulating into existing leaf gradients), then frees the graph.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; nothing to differentiate")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
        node._parents = ()
        node._vjp = None
