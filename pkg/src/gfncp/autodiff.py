"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` is created per forward pass.  Leaves are registered with
``tape.leaf(array)``; every kernel applied to a tensor that requires grad
appends its output to the same tape, so the tape is topologically ordered by
construction.  :func:`backward` walks it once in reverse.

Tensors without a tape behave like plain constants: kernels still run (with
the same shape and overflow checks) but nothing is recorded.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class NumericalOverflowError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of the nodes produced during one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, data) -> "Tensor":
        t = Tensor(data, requires_grad=True)
        t.tape = self
        t._index = len(self.nodes)
        self.nodes.append(t)
        return t

    def _record(self, t: "Tensor"):
        t._index = len(self.nodes)
        self.nodes.append(t)

    def __len__(self):
        return len(self.nodes)

    def release(self) -> None:
        """Drop the recorded graph so its buffers are freed without waiting for the cycle collector."""
        for t in self.nodes:
            t._parents = ()
            t._backward = None
        self.nodes = []


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.kernel = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, kernel={self.kernel}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kernel: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalOverflowError(f"{kernel}: non-finite output (shape {np.shape(data)})")
    out = Tensor(data)
    out.kernel = kernel
    tape = None
    for p in parents:
        if p.requires_grad:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise TapeError(f"{kernel}: inputs recorded on different tapes")
    if tape is not None:
        out.requires_grad = True
        out.tape = tape
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape._record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kernel, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kernel}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for a batch of rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: shapes x{x.shape} w{w.shape} b{b.shape} do not conform")

    def bw(g):
        # constant inputs (raw points) need no gradient
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _make("affine", x.data @ w.data + b.data, (x, w, b), bw)


def spmm(m, x) -> Tensor:
    """Product of a constant (sparse or dense) matrix with a 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2 or m.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: shapes {m.shape} and {x.shape} do not conform")
    data = m @ x.data
    if sp.issparse(data):
        data = data.toarray()
    return _make("spmm", np.asarray(data), (x,), lambda g: (np.asarray(m.T @ g),))


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(kernel, a, axis):
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{kernel}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axis = _norm_axis("sum", a, axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis("mean", a, axis)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted log-sum-exp; entries where ``mask`` is False are excluded."""
    a = as_tensor(a)
    axis = _norm_axis("logsumexp", a, axis)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("logsumexp: a reduction slice is fully masked")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    return _make("logsumexp", out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


def min(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:  # noqa: A001
    """Minimum along ``axis``; the gradient is routed to the (first) argmin."""
    a = as_tensor(a)
    axis = _norm_axis("min", a, axis)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("min: a reduction slice is fully masked")
        x = np.where(mask, x, np.inf)
    arg = np.expand_dims(x.argmin(axis=axis), axis)
    out = np.take_along_axis(x, arg, axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, arg, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make("min", out, (a,), bw)


# ---------------------------------------------------------------------------
# structural

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform on axis {axis}") from None
    ax = axis % data.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", data, ts, bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    try:
        data = np.array(a.data[idx], dtype=np.float64)
    except IndexError as e:
        raise ShapeError(f"index: {e} (shape {a.shape})") from None

    basic = isinstance(idx, (slice, int)) or (
        isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx))

    def bw(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _make("index", data, (a,), bw)


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# backward pass and gradient checking

def backward(tape: Tape, root: Tensor) -> None:
    """Populate ``.grad`` of every leaf on ``tape`` with d(root)/d(leaf).

    Leaf grads accumulate across calls; intermediate grads are per call.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root.tape is not tape or not (0 <= root._index < len(tape.nodes)) or tape.nodes[root._index] is not root:
        raise TapeError("backward: root was not recorded on this tape")
    grads: dict[int, np.ndarray] = {root._index: np.ones_like(root.data)}
    for i in range(root._index, -1, -1):
        node = tape.nodes[i]
        g = grads.pop(i, None)
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            if g is not None:
                node.grad = node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            j = parent._index
            if j in grads:
                grads[j] = grads[j] + pg
            else:
                grads[j] = pg


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences.

    ``fn`` maps a tensor shaped like ``point`` to a scalar tensor.  The error
    of each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"grad_check: step {step} outside [1e-7, 1e-3]")
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(point.copy())
    y = fn(x)
    if y.requires_grad:
        backward(tape, y)
        analytic = x.grad.reshape(-1)
    else:
        analytic = np.zeros(point.size)
    flat = point.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for sgn in (1.0, -1.0):
            p = flat.copy()
            p[i] += sgn * step
            try:
                v = fn(Tensor(p.reshape(point.shape))).item()
            except NumericalOverflowError as e:
                raise NumericalOverflowError(f"grad_check: fn non-finite at perturbed coordinate {i}") from e
            if not np.isfinite(v):
                raise NumericalOverflowError(f"grad_check: fn non-finite at perturbed coordinate {i}")
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
