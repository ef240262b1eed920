"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each op returns a new :class:`Tensor` holding its parents and a closure that
maps the upstream gradient to parent gradients.  ``backward`` orders the graph
topologically (the tape) and accumulates gradients into leaves that have
``requires_grad`` set.

Reductions go through :func:`ordered_sum`, which adds slices one after another
along the reduced axis, so results do not depend on numpy's pairwise summation
blocking and can be reproduced by a plain Python loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def ordered_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` by sequential accumulation in index order."""
    axis = axis % x.ndim
    out = np.add.reduce(np.ascontiguousarray(np.moveaxis(x, axis, 0)), axis=0)
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")
    __array_ufunc__ = None  # make ndarray op Tensor defer to the reflected method

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operators ---------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# -- elementwise arithmetic ---------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), vjp)


# -- unary functions ----------------------------------------------------------

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    if p == 2:
        return _make(x.data * x.data, (x,), lambda g: (g * 2.0 * x.data,))
    out = x.data ** p
    return _make(out, (x,), lambda g: (g * p * x.data ** (p - 1),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x) -> Tensor:
    """Hinge max(x, 0); subgradient 0 at the kink."""
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data > floor
    return _make(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """GeLU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _make(out, (x,), vjp)


# -- reductions ---------------------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        out = ordered_sum(x.data.reshape(-1), 0)
        return _make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    out = ordered_sum(x.data, axis, keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis, keepdims) * (1.0 / n)


def amax(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max along an axis; the gradient goes to the first maximiser."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis)
        return (gx,)

    return _make(out, (x,), vjp)


def amin(x, axis: int, keepdims: bool = False) -> Tensor:
    return -amax(-as_tensor(x), axis, keepdims)


def norm(x, axis: int, keepdims: bool = False) -> Tensor:
    """Euclidean norm; gradient is defined as 0 where the norm is below 1e-12."""
    x = as_tensor(x)
    out = np.sqrt(ordered_sum(x.data * x.data, axis, keepdims=True))
    safe = np.where(out < NORM_EPS, np.inf, out)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * x.data / safe,)

    return _make(out if keepdims else np.squeeze(out, axis), (x,), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / ordered_sum(e, axis, keepdims=True)

    def vjp(g):
        return (out * (g - ordered_sum(g * out, axis, keepdims=True)),)

    return _make(out, (x,), vjp)


# -- shape and indexing -------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a: int, b: int) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def getitem(x, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        return (gx,)

    return _make(x.data[idx], (x,), vjp)


def gather(x, index: np.ndarray) -> Tensor:
    """Rows ``x[index]`` along axis 0."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"gather: index out of range for leading dim {x.shape[0]}")

    return _make(x.data[index], (x,), lambda g: (scatter_add(g, index, x.shape[0]),))


def scatter_add(x: np.ndarray, ids: np.ndarray, num_segments: int) -> np.ndarray:
    """Sum rows of ``x`` sharing an id.

    Rows are stably sorted by id and each run is reduced in row order, so the
    result is reproducible bit for bit.  Empty segments come out as zero.
    """
    ids = np.asarray(ids, dtype=np.intp)
    out = np.zeros((num_segments,) + x.shape[1:])
    if ids.size == 0:
        return out
    if np.any(ids[1:] < ids[:-1]):
        order = np.argsort(ids, kind="stable")
        ids, x = ids[order], x[order]
    counts = np.bincount(ids, minlength=num_segments)
    present = counts > 0
    starts = (np.cumsum(counts) - counts)[present]
    out[present] = np.add.reduceat(x, starts, axis=0)
    return out


def segment_sum(x, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Scatter-add rows of ``x`` into ``num_segments`` buckets (see
    :func:`scatter_add`)."""
    x = as_tensor(x)
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    if segment_ids.shape != x.shape[:1]:
        raise ShapeError(
            f"segment_sum: {segment_ids.shape[0]} ids for leading dim {x.shape[0]}")
    out = scatter_add(x.data, segment_ids, num_segments)
    return _make(out, (x,), lambda g: (g[segment_ids],))


def segment_max(x: np.ndarray, segment_ids: np.ndarray, num_segments: int) -> np.ndarray:
    """Non-differentiable per-segment max (used for softmax shifts)."""
    ids = np.asarray(segment_ids, dtype=np.intp)
    out = np.full((num_segments,) + x.shape[1:], -np.inf)
    if ids.size == 0:
        return out
    if np.any(ids[1:] < ids[:-1]):
        order = np.argsort(ids, kind="stable")
        ids, x = ids[order], x[order]
    counts = np.bincount(ids, minlength=num_segments)
    present = counts > 0
    out[present] = np.maximum.reduceat(x, (np.cumsum(counts) - counts)[present], axis=0)
    return out


def segment_softmax(x, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Softmax over rows that share a segment id, independently per column."""
    x = as_tensor(x)
    shift = segment_max(x.data, segment_ids, num_segments)[segment_ids]
    e = exp(x - shift)
    denom = gather(segment_sum(e, segment_ids, num_segments), segment_ids)
    return e / denom


# -- engine ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf."""
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    tape = _topo_order(output)
    grads = {id(output): np.ones_like(output.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    excluded: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.n_checked > 0


def grad_check(fn: Callable[..., Tensor], points: Sequence[np.ndarray],
               step: float = 1e-6, kink_tol: float = 1e-2) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn`` with central differences.

    The error is normwise: ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    over all checked components.  Components where the one-sided slopes
    disagree by more than ``kink_tol`` are treated as non-smooth and excluded.
    """
    points = [np.array(p, dtype=np.float64) for p in points]
    leaves = [Tensor(p.copy(), requires_grad=True) for p in points]
    out = fn(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: function value is not finite")
    backward(out)
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def value(args):
        v = fn(*[Tensor(a) for a in args]).data
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("grad_check: function value is not finite")
        return float(v)

    f0 = float(out.data)
    a_vals, n_vals, excluded = [], [], []
    for k, p in enumerate(points):
        for idx in np.ndindex(p.shape):
            args = [q.copy() for q in points]
            args[k][idx] = p[idx] + step
            fp = value(args)
            args[k][idx] = p[idx] - step
            fm = value(args)
            fwd, bwd = (fp - f0) / step, (f0 - fm) / step
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                excluded.append((k, idx))
                continue
            a_vals.append(analytic[k][idx])
            n_vals.append((fp - fm) / (2 * step))
    if not a_vals:
        return GradCheckReport(0.0, 0, excluded)
    a, n = np.array(a_vals), np.array(n_vals)
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-300)
    return GradCheckReport(float(np.abs(a - n).max() / scale), len(a_vals), excluded)
