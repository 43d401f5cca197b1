"""Minimal dense tensors with reverse-mode differentiation.

Only the operations the entropy model needs are provided.  Every tensor is a
row-major float64 numpy array; gradients are propagated through a graph of
closures that is replayed in reverse topological order by :func:`backward`.
"""

from __future__ import annotations

import math
import threading
from collections import defaultdict
from contextlib import contextmanager

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "ShapeError",
    "DegenerateRowError",
    "BackwardError",
    "MacCounter",
    "count_macs",
    "record_macs",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "exp",
    "log",
    "log2",
    "tanh",
    "softplus",
    "gelu",
    "ndtr",
    "clamp_min",
    "matmul",
    "linear",
    "scale_channels",
    "softmax_lastdim",
    "layer_norm",
    "tensor_sum",
    "mean",
    "reshape",
    "take_rows",
    "concat_rows",
    "slice_cols",
    "concat_cols",
    "transpose",
    "where",
    "backward",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN2 = math.log(2.0)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry (every key is masked)."""


class BackwardError(RuntimeError):
    """Invalid use of :func:`backward`."""


class MacCounter:
    """Per-thread tally of multiply-accumulate operations by kind."""

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, kind: str, n: int) -> None:
        self.counts[kind] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, kind: str) -> int:
        return self.counts.get(kind, 0)


_local = threading.local()


@contextmanager
def count_macs():
    """Record the MACs of every matmul-type operation executed in the block."""
    counter = MacCounter()
    previous = getattr(_local, "counter", None)
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = previous


def record_macs(kind: str, n: int) -> None:
    counter = getattr(_local, "counter", None)
    if counter is not None:
        counter.add(kind, n)


class Tensor:
    """A float64 array that optionally tracks gradients."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def log2(a: Tensor) -> Tensor:
    return _result(np.log2(a.data), (a,), lambda g: (g / (a.data * _LN2),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * special.expit(x),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _result(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def ndtr(a: Tensor) -> Tensor:
    """Standard normal CDF."""
    x = a.data
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _result(special.ndtr(x), (a,), lambda g: (g * pdf,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor
    return _result(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = constant(a), constant(b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _result(np.where(mask, a.data, b.data), (a, b), bw)


def scale_channels(x: Tensor, gains: Tensor) -> Tensor:
    """Multiply the last axis of ``x`` by a per-channel gain vector."""
    if gains.ndim != 1 or gains.shape[0] != x.shape[-1]:
        raise ShapeError(f"scale_channels: gains {gains.shape} vs channels {x.shape[-1]}")
    return mul(x, gains)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., K] @ b[K, N]``."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    rows = a.data.size // a.shape[-1]
    record_macs("matmul", rows * b.shape[0] * b.shape[1])

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalisation


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row softmax; ``-inf`` entries are masked and never exponentiated."""
    data = x.data
    visible = np.isfinite(data)
    if not visible.any(axis=-1).all():
        raise DegenerateRowError("softmax row with every entry masked")
    row_max = np.max(np.where(visible, data, -np.inf), axis=-1, keepdims=True)
    shifted = np.where(visible, data - row_max, 0.0)
    e = np.where(visible, np.exp(shifted), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs channels {c}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# reductions and reshaping


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(out, (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def take_rows(x: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), bw)


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [constant(p) for p in parts]
    tails = {p.shape[1:] for p in parts}
    if len(tails) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ {tails}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D tensor")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _result(x.data[:, start:stop].copy(), (x,), bw)


def concat_cols(parts: list[Tensor]) -> Tensor:
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def backward(loss: Tensor, inputs: list[Tensor] | None = None) -> list[np.ndarray] | None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate into existing ``.grad`` arrays.  When ``inputs``
    is given, their gradients are returned (zeros for tensors the loss does
    not depend on).  Calling twice on the same loss raises ``BackwardError``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise BackwardError("backward already ran for this loss; rebuild the graph")
    loss._consumed = True
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological(loss)):
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
                    grads[key] = np.asarray(pg, dtype=np.float64)
    if inputs is None:
        return None
    out = []
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        out.append(t.grad)
    return out
