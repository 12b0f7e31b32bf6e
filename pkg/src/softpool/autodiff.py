"""Reverse-mode differentiation over dense float64 arrays.

A Tensor wraps a numpy array; ops record themselves on the thread's active
Tape whenever an input requires gradients. Outside a ``with Tape():`` block
everything runs in plain inference mode. Gradients through data-dependent
index selections (sorting, nearest neighbours, transport assignments) treat
the selection as locally constant, which is the exact gradient almost
everywhere for these piecewise-smooth maps.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of ops; backward walks it once, in reverse.

    Nodes are appended in execution order, which is already a topological
    order of the graph, so the backward pass is a single reversed sweep.
    A tape is single-owner: it binds to the creating thread and is consumed
    by its first backward call.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = None
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every requires_grad tensor reachable from loss."""
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        self._consumed = True
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not loss.requires_grad:
            raise ValueError("loss is not connected to any requires_grad tensor")

        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.nodes):
            g = acc.pop(id(out), None)
            if g is None:
                continue
            for inp, local in zip(inputs, vjp(g)):
                if local is None or not inp.requires_grad:
                    continue
                slot = acc.get(id(inp))
                if slot is None:
                    acc[id(inp)] = local if local.flags.owndata else local.copy()
                else:
                    slot += local
            # keep tensors referenced by id alive until the sweep finishes
            out.grad = out.grad
        for out, inputs, _ in self.nodes:
            for t in inputs:
                if t.requires_grad and id(t) in acc:
                    t.grad = acc[id(t)] if t.grad is None else t.grad + acc.pop(id(t), 0.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")
    return data


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.data.shape} with {b.data.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")
    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)
    return _make("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "div")
    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb
    return _make("div", a.data / b.data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    def vjp(g):
        return g @ b.data.T, a.data.T @ g
    return _make("matmul", a.data @ b.data, (a, b), vjp)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    mask = np.where(x.data > 0.0, 1.0, slope)
    def vjp(g):
        return (g * mask,)
    return _make("leaky_relu", x.data * mask, (x,), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)
    return _make("softmax", y, (x,), vjp)


def log(x, eps: float = 0.0) -> Tensor:
    """Natural log; with eps > 0 the argument is clamped below at eps."""
    x = _as_tensor(x)
    arg = np.maximum(x.data, eps) if eps else x.data
    def vjp(g):
        local = g / arg
        if eps:
            local = np.where(x.data > eps, local, 0.0)
        return (local,)
    return _make("log", np.log(arg), (x,), vjp)


def tsum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)
    return _make("sum", np.asarray(x.data.sum(axis=axis)), (x,), vjp)


def tmean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), x.data.shape).copy(),)
    return _make("mean", np.asarray(x.data.mean(axis=axis)), (x,), vjp)


def gather(x, rows) -> Tensor:
    """Select rows by index; backward scatter-adds into the source."""
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    if rows.ndim != 1:
        raise ShapeError(f"gather: row index must be 1-D, got shape {rows.shape}")
    if rows.size and (rows.min() < 0 or rows.max() >= x.data.shape[0]):
        raise IndexError("gather: row index out of range")
    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        return (gx,)
    return _make("gather", x.data[rows], (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )
    return _make("concat", np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    def vjp(g):
        return (g.reshape(x.data.shape),)
    return _make("reshape", x.data.reshape(shape), (x,), vjp)


def linear_interpolate(x, factor: int) -> Tensor:
    """Insert factor-1 evenly spaced rows between each consecutive row pair.

    A matrix with n rows becomes (n-1)*factor + 1 rows; the originals are
    kept and interpolants are convex combinations of their bracketing pair.
    """
    x = _as_tensor(x)
    if factor < 1:
        raise ValueError("linear_interpolate: factor must be >= 1")
    n = x.data.shape[0]
    if n < 2:
        raise ShapeError("linear_interpolate: need at least 2 rows")
    out_n = (n - 1) * factor + 1
    pos = np.arange(out_n) / factor
    lo = np.minimum(pos.astype(np.intp), n - 2)
    t = (pos - lo)[:, None]
    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, lo, g * (1.0 - t))
        np.add.at(gx, lo + 1, g * t)
        return (gx,)
    return _make("linear_interpolate", x.data[lo] * (1.0 - t) + x.data[lo + 1] * t, (x,), vjp)


def custom_op(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    """Register an op whose forward value and vjp were computed by the caller."""
    return _make(name, data, inputs, vjp)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare analytic gradients of f against central differences.

    f re-evaluates the loss from the params' current data. Returns the worst
    relative error max|analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    over every coordinate of every param.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(1e-8, abs(gflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
