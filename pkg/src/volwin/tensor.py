"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 or float64, row-major). Every
differentiable operation records a tape node pointing at its input tensors
together with a closure that turns the output adjoint into input adjoints.
``Tensor.backward`` walks the tape of a scalar in reverse topological order
and accumulates gradients on every tensor that requires them.

The tape is append-only and tensors never alias back into their own
history, so the recorded graph is a DAG by construction. One training step
is expected to run on a single logical thread; concurrent *forward* passes
over shared read-only tensors are safe.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

# When true, every op output is checked for NaN/Inf and a NumericError is
# raised on violation. Costs one pass over each result array.
FINITE_CHECKS = True

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class TapeNode:
    """One recorded operation: identifier, parent tensors, backward rule.

    Values the backward rule needs are captured by the ``backward_fn``
    closure. ``backward_fn(g, needs)`` receives the output adjoint and a
    tuple of booleans saying which inputs require a gradient; it returns
    one adjoint array (or None) per input.
    """

    __slots__ = ("op_id", "inputs", "backward_fn")

    def __init__(self, op_id, inputs, backward_fn):
        self.op_id = op_id
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- basic properties ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every tensor this scalar depends on."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward on a tensor that does not require grad")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            node = t.node
            if node is None or t.grad is None:
                continue
            needs = tuple(p.requires_grad for p in node.inputs)
            grads = node.backward_fn(t.grad, needs)
            for parent, g in zip(node.inputs, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.dtype != parent.dtype:
                    g = g.astype(parent.dtype)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- operators ---------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method-style ops ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)


def _toposort(root: Tensor):
    """Post-order over the tape reachable from ``root`` (iterative)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, post = stack.pop()
        if post:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.inputs:
                if id(p) not in seen and (p.node is not None or p.requires_grad):
                    stack.append((p, False))
    return order


_MOVEMENT_OPS = frozenset(
    {"reshape", "transpose", "narrow", "pad", "roll", "concat", "stride2", "take_rows", "neg"}
)


def make_op(op_id, data, inputs, backward_fn) -> Tensor:
    """Wrap a computed array as a Tensor, recording a tape node if needed."""
    data = np.asarray(data)
    if FINITE_CHECKS and data.dtype.kind == "f" and op_id not in _MOVEMENT_OPS:
        # A single sum pass: NaN/Inf anywhere propagates into the total.
        with np.errstate(over="ignore", invalid="ignore"):
            if not np.isfinite(data.sum()):
                raise NumericError(f"{op_id}: result contains non-finite values")
    requires = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires
    out.grad = None
    out.node = TapeNode(op_id, tuple(inputs), backward_fn) if requires else None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce an adjoint back to the shape of a broadcast input."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return make_op("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return make_op("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (
            _unbroadcast(g * bd, a.shape) if needs[0] else None,
            _unbroadcast(g * ad, b.shape) if needs[1] else None,
        )

    return make_op("mul", ad * bd, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def backward(g, needs):
        return (
            _unbroadcast(g / bd, a.shape) if needs[0] else None,
            _unbroadcast(-g * ad / (bd * bd), b.shape) if needs[1] else None,
        )

    return make_op("div", ad / bd, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (-g,)

    return make_op("neg", -a.data, (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def backward(g, needs):
        return (g * p * ad ** (p - 1),)

    return make_op("pow", ad**p, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g, needs):
        return (g * out,)

    return make_op("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def backward(g, needs):
        return (g / ad,)

    return make_op("log", np.log(ad), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g, needs):
        return (g * 0.5 / out,)

    return make_op("sqrt", out, (a,), backward)


# -- shape manipulation ----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def backward(g, needs):
        return (g.reshape(old),)

    return make_op("reshape", a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g, needs):
        return (g.transpose(inv),)

    return make_op("transpose", a.data.transpose(axes), (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of bounds for extent {a.shape[axis]} on axis {axis}"
        )
    sel = [slice(None)] * a.ndim
    sel[axis] = slice(start, start + length)
    sel = tuple(sel)
    shape = a.shape

    def backward(g, needs):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[sel] = g
        return (gx,)

    return make_op("narrow", a.data[sel].copy(), (a,), backward)


def pad_nd(a: Tensor, pads) -> Tensor:
    """Zero-pad; ``pads`` is a (before, after) pair per axis."""
    pads = [tuple(p) for p in pads]
    if len(pads) != a.ndim:
        raise ShapeError(f"pad_nd: {len(pads)} pad pairs for {a.ndim} axes")
    sel = tuple(slice(b, b + n) for (b, _), n in zip(pads, a.shape))

    def backward(g, needs):
        return (g[sel],)

    return make_op("pad", np.pad(a.data, pads), (a,), backward)


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(axes)

    def backward(g, needs):
        return (np.roll(g, tuple(-s for s in shifts), axes),)

    return make_op("roll", np.roll(a.data, shifts, axes), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2D table; differentiable into the table only."""
    index = np.asarray(index)
    rows = table.shape[0]

    def backward(g, needs):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, index, g)
        return (gt,)

    if index.size and (index.min() < 0 or index.max() >= rows):
        raise ShapeError(f"take_rows: index outside [0, {rows})")
    return make_op("take_rows", table.data[index], (table,), backward)


# -- reductions -----------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    shape = a.shape

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([shape[i] for i in axis]))

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_op("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {ad.shape} @ {bd.shape}")

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return (ga, gb)

    return make_op("matmul", np.matmul(ad, bd), (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g, needs):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return make_op("softmax", out, (a,), backward)
