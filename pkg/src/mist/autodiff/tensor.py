"""Dense float64 tensors with a reverse-mode gradient record.

Every operation that produces a tensor from inputs requiring gradients
attaches a :class:`Node` holding the parents and a closure mapping the
output gradient to the parents' gradients.  ``Tensor.backward`` walks the
resulting DAG in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]
Shape = Tuple[int, ...]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


_grad_enabled = True
_shape_only = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def shape_only():
    """Propagate shapes without computing values.

    Tensors created inside the block hold zero-strided read-only arrays, so a
    full-size model can be constructed and traced in milliseconds.  Values
    are meaningless; only ``.shape`` is.
    """
    global _shape_only
    prev = _shape_only
    _shape_only = True
    try:
        with no_grad():
            yield
    finally:
        _shape_only = prev


def is_shape_only() -> bool:
    return _shape_only


def meta_array(shape: Shape) -> np.ndarray:
    return np.broadcast_to(np.float64(0.0), tuple(int(s) for s in shape))


class Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Shape:
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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- reverse pass ------------------------------------------------------
    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        The graph is released afterwards; calling ``backward`` twice on the
        same output is not supported.
        """
        if self.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not require grad; nothing to differentiate")
        seed = np.ones(self.shape) if grad is None else np.asarray(grad, dtype=np.float64).reshape(self.shape)

        order = _topological_order(self)
        grads = {id(self): seed}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            parent_grads = t.node.backward(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for t in order:
            t.node = None

    # -- operator sugar ----------------------------------------------------
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
        from mist.autodiff.ops import matmul

        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        return reduce(self, "max", axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` and record the graph edge when any parent needs grad."""
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward)
    return out


def shape_result(shape: Shape) -> Tensor:
    return Tensor(meta_array(shape))


def unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def broadcast_shape(a: Shape, b: Shape, op: str) -> Shape:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} are not broadcastable") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = broadcast_shape(a.shape, b.shape, "add")
    if _shape_only:
        return shape_result(shape)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = broadcast_shape(a.shape, b.shape, "sub")
    if _shape_only:
        return shape_result(shape)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = broadcast_shape(a.shape, b.shape, "mul")
    if _shape_only:
        return shape_result(shape)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = broadcast_shape(a.shape, b.shape, "div")
    if _shape_only:
        return shape_result(shape)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    if _shape_only:
        return shape_result(a.shape)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    if _shape_only:
        return shape_result(a.shape)
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    if _shape_only:
        return shape_result(a.shape)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    if _shape_only:
        return shape_result(a.shape)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if _shape_only:
        return shape_result(a.shape)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def elementwise(x, kind: str, other=None) -> Tensor:
    """Dispatch by name: ``relu``, ``sigmoid``, ``add`` or ``mul``."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind in ("add", "mul"):
        if other is None:
            raise ValueError(f"elementwise {kind} needs a second operand")
        return add(x, other) if kind == "add" else mul(x, other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(x, kind: str, axis=None, keep: bool = False) -> Tensor:
    """Sum, mean or max along ``axis``.

    Max routes its gradient to the first maximal element along the axis.
    """
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    if kind == "max" and len(axes) != 1:
        raise ShapeError("max reduces over exactly one axis")
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    shape = kept if keep else tuple(s for i, s in enumerate(x.shape) if i not in axes)
    if _shape_only:
        return shape_result(shape)

    if kind == "sum" or kind == "mean":
        count = math.prod(x.shape[a] for a in axes)
        out = x.data.sum(axis=axes, keepdims=True)
        if kind == "mean":
            out = out / count
        scale = 1.0 if kind == "sum" else 1.0 / count

        def backward(g):
            return (np.broadcast_to(g.reshape(kept) * scale, x.shape).copy(),)

    elif kind == "max":
        ax = axes[0]
        idx = np.argmax(x.data, axis=ax)
        idx = np.expand_dims(idx, ax)
        out = np.take_along_axis(x.data, idx, axis=ax)

        def backward(g):
            gx = np.zeros(x.shape)
            np.put_along_axis(gx, idx, g.reshape(kept), axis=ax)
            return (gx,)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return make_result(out.reshape(shape), (x,), backward, kind)


# -- shape manipulation -----------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    if _shape_only:
        return shape_result(shape)
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    shape = tuple(x.shape[a] for a in axes)
    if _shape_only:
        return shape_result(shape)
    inverse = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "permute")


def getitem(x, index) -> Tensor:
    """Basic (slice/int) indexing; the gradient scatters back into zeros."""
    x = as_tensor(x)
    if _shape_only:
        return shape_result(np.empty(x.shape, dtype=np.bool_)[index].shape)
    out = x.data[index]

    def backward(g):
        gx = np.zeros(x.shape)
        gx[index] = g
        return (gx,)

    return make_result(out, (x,), backward, "getitem")
