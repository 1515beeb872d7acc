"""Dense float64 tensor with reverse-mode automatic differentiation.

Each differentiable op records its parents and a closure mapping the output
gradient to one gradient per parent. :meth:`Tensor.backward` orders the
recorded graph topologically and visits every node once, in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeMismatch

MAX_RANK = 5

_grad_enabled = True


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


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatch(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # ------------------------------------------------------------------ basics
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
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a single-element output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
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

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op, recording the graph when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return make_result(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(reduce_sum(a, axes, keepdims), 1.0 / count)


# --------------------------------------------------------------------- linalg


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul batch axes differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# ------------------------------------------------------------------- layout


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"{axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeMismatch(f"concat along axis {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % a.ndim
    sizes = [int(s) for s in sizes]
    if sum(sizes) != a.shape[ax] or any(s < 1 for s in sizes):
        raise ShapeMismatch(f"split sizes {sizes} do not partition extent {a.shape[ax]}")
    outs = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + s)
        outs.append(_slice(a, tuple(idx)))
        start += s
    return outs


def _slice(a: Tensor, index: tuple) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_result(a.data[index].copy(), (a,), backward, "slice")


def take(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows: ``out[...] = table[idx[...]]``; backward scatter-adds."""
    from ._kernels import scatter_add_rows

    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch("take index out of range")

    def backward(g):
        flat = idx.reshape(-1)
        rows = g.reshape((flat.size,) + table.shape[1:])
        out = np.zeros_like(table.data)
        return (scatter_add_rows(out, flat, rows),)

    return make_result(table.data[idx], (table,), backward, "take")


