"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every operation builds a node linking its output to its inputs; ``backward``
sorts the reachable graph into a :class:`ComputationTape` and replays it in
reverse, accumulating gradients into leaf tensors.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "ShapeError",
    "DegenerateRowError",
    "EmptyLossError",
    "RankError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "layernorm",
    "cross_entropy",
    "stop_gradient",
    "sigmoid",
    "gelu",
    "embedding",
    "backward",
    "zero_grads",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has every entry masked out."""


class EmptyLossError(ValueError):
    """Every position of a loss was ignored."""


class RankError(ValueError):
    """Backward was called on a non-scalar tensor."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run operations without recording graph nodes (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer.

    ``data`` is kept as a C-contiguous numpy array; its row-major flattening is
    the canonical flat layout. Scalars have shape ``()``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return tsum(self, axis, keepdims) * (1.0 / n)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, fn, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ops ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (GPT-2 variant)."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), fn, "gelu")


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; the backward pass sends zero to ``a``."""
    return _node(a.data.copy(), (a,), lambda g: (np.zeros_like(g),), "stop_gradient")


# -- shape ops ---------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), fn, "sum")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add back into ``weight``."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def fn(g):
        gw = np.zeros(shape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gw,)

    return _node(weight.data[ids], (weight,), fn, "embedding")


# -- matrix ops --------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            # weight matrix: fold batch axes into one GEMM
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), fn, "matmul")


def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked-out (False) entries are exactly zero."""
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has no unmasked entries")
        xd = np.where(mask, xd, -np.inf)
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), fn, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm gain/bias {gain.shape}/{bias.shape} vs last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _node(xhat * gd + bias.data, (x, gain, bias), fn, "layernorm")


def cross_entropy(logits: Tensor, targets, ignore: Optional[int] = None) -> Tensor:
    """Mean next-token negative log-likelihood over non-ignored rows.

    ``logits`` has shape ``(N, V)``; ``targets`` holds N integer ids.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (tokens, vocab) logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"targets length {t.shape[0]} != logits rows {n}")
    keep = np.ones(n, dtype=bool) if ignore is None else t != ignore
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossError("every position is ignored")
    if ((t[keep] < 0) | (t[keep] >= v)).any():
        raise ValueError(f"target id outside vocab of size {v}")
    xd = logits.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.nonzero(keep)[0]
    nll = lse[rows] - z[rows, t[rows]]
    loss = nll.sum() / count

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, t[rows]] -= 1.0
        p[~keep] = 0.0
        return (p * (g / count),)

    return _node(np.asarray(loss), (logits,), fn, "cross_entropy")


# -- tape --------------------------------------------------------------------
@dataclass
class TapeNode:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class ComputationTape:
    """Nodes in topological order (inputs before the node that consumes them)."""

    nodes: list[TapeNode] = field(default_factory=list)
    visits: int = 0

    def __len__(self) -> int:
        return len(self.nodes)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> ComputationTape:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Gradients accumulate (+=) across calls until :func:`zero_grads`.
    Returns the replayed tape; ``tape.visits`` counts node executions.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    tape = ComputationTape(
        [TapeNode(t.op, tuple(id(p) for p in t._parents), id(t)) for t in order if not t.is_leaf]
    )
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        tape.visits += 1
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + gp if k in grads else np.array(gp, dtype=np.float64)
    return tape


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
