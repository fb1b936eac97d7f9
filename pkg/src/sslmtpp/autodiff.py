"""Minimal define-by-run reverse-mode automatic differentiation over numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them. Calling
:meth:`Tensor.backward` on a scalar orders the reachable graph topologically and
runs those closures once each, accumulating gradients on fan-out.

Broadcasting is deliberately narrow: two operands must have equal shapes, or the
shape of one must be a trailing suffix of the other (a bias ``[H]`` against a
batch ``[B, H]``, or a scalar against anything).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "DetachedError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "abs",
    "softmax",
    "log_softmax",
    "concat",
    "stack",
    "slice",
    "take",
    "reshape",
    "sum",
    "mean",
    "topological_order",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a tensor."""


class DetachedError(RuntimeError):
    """backward() was called on a tensor with no path to any parameter."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build outputs without recording parents (inference only)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(data: np.ndarray, kind: str) -> None:
    # sum() is one pass with no temporary and propagates both NaN and inf
    if not np.isfinite(data.sum()):
        raise NonFiniteError(f"{kind}: produced non-finite values")


class Tensor:
    """An array node in the computation graph.

    ``grad`` stays ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_owned")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._owned = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], kind: str) -> "Tensor":
        _check_finite(data, kind)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = kind
        out._owned = False
        out._backward = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
        else:
            out.requires_grad = False
            out._parents = ()
        return out

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

    def zero_grad(self) -> None:
        self.grad = None
        self._owned = False

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
            self._owned = False
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    def _accumulate_region(self, index, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=DTYPE)
            self._owned = True
        elif not self._owned:
            self.grad = self.grad.copy()
            self._owned = True
        self.grad[index] += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_suffix(short: tuple[int, ...], long: tuple[int, ...]) -> bool:
    return len(short) <= len(long) and long[len(long) - len(short):] == short


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_suffix(a.shape, b.shape) or _is_suffix(b.shape, a.shape):
        return
    raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    out = Tensor._from_op(a.data + b.data, (a, b), "add")
    if out.requires_grad:

        def _backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        out._backward = _backward
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = Tensor._from_op(a.data - b.data, (a, b), "sub")
    if out.requires_grad:

        def _backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        out._backward = _backward
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._from_op(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(-g)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = Tensor._from_op(a.data * b.data, (a, b), "mul")
    if out.requires_grad:

        def _backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        out._backward = _backward
    return out


def matmul(a, w) -> Tensor:
    """``a[..., k] @ w[k, n]``; leading dimensions of ``a`` act as a batch."""
    a, w = _as_tensor(a), _as_tensor(w)
    if a.ndim < 1 or w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {w.shape}")
    out = Tensor._from_op(a.data @ w.data, (a, w), "matmul")
    if out.requires_grad:

        def _backward(g):
            if a.requires_grad:
                a._accumulate(g @ w.data.T)
            if w.requires_grad:
                k, n = w.shape
                w._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))

        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# elementwise unary


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor._from_op(y, (x,), "tanh")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * (1.0 - y * y))
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # tanh form avoids exp overflow for large |x|
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    out = Tensor._from_op(y, (x,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * y * (1.0 - y))
    return out


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError below
        y = np.exp(x.data)
    out = Tensor._from_op(y, (x,), "exp")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * y)
    return out


def log(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    out = Tensor._from_op(y, (x,), "log")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g / x.data)
    return out


def abs(x) -> Tensor:  # noqa: A001 - mirrors the primitive's name
    x = _as_tensor(x)
    out = Tensor._from_op(np.abs(x.data), (x,), "abs")
    if out.requires_grad:
        # subgradient 0 at the kink
        out._backward = lambda g: x._accumulate(g * np.sign(x.data))
    return out


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._from_op(y, (x,), "softmax")
    if out.requires_grad:

        def _backward(g):
            x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

        out._backward = _backward
    return out


def log_softmax(x) -> Tensor:
    """Numerically stable log of the last-axis softmax."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor._from_op(y, (x,), "log_softmax")
    if out.requires_grad:

        def _backward(g):
            x._accumulate(g - np.exp(y) * g.sum(axis=-1, keepdims=True))

        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}")
    out = Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat")
    if out.requires_grad:
        bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

        def _backward(g):
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
                if t.requires_grad:
                    index = (np.s_[:],) * ax + (np.s_[lo:hi],)
                    t._accumulate(g[index])

        out._backward = _backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: no inputs")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError(f"stack: unequal shapes {[t.shape for t in tensors]}")
    ax = axis % (len(shape) + 1)
    out = Tensor._from_op(np.stack([t.data for t in tensors], axis=ax), tensors, "stack")
    if out.requires_grad:

        def _backward(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(np.take(g, i, axis=ax))

        out._backward = _backward
    return out


def slice(x, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing: ints, slices, Ellipsis, None."""
    x = _as_tensor(x)
    index = index if isinstance(index, tuple) else (index,)
    for item in index:
        if not (item is None or item is Ellipsis or isinstance(item, (int, np.integer, type(np.s_[:])))):
            raise ShapeError(f"slice: unsupported index {item!r}; use take() for gathers")
    try:
        y = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {x.shape}") from None
    out = Tensor._from_op(y, (x,), "slice")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate_region(index, g)
    return out


def take(weight, indices) -> Tensor:
    """Row gather ``weight[indices]`` for a 2-D table; output shape ``indices.shape + (dim,)``."""
    weight = _as_tensor(weight)
    idx = np.asarray(indices)
    if weight.ndim != 2:
        raise ShapeError(f"take: table must be 2-D, got {weight.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"take: index out of range [0, {weight.shape[0]})")
    out = Tensor._from_op(weight.data[idx], (weight,), "take")
    if out.requires_grad:

        def _backward(g):
            gw = np.zeros(weight.shape, dtype=DTYPE)
            np.add.at(gw, idx.reshape(-1), g.reshape(-1, weight.shape[1]))
            weight._accumulate(gw)

        out._backward = _backward
    return out


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    out = Tensor._from_op(y, (x,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g.reshape(x.shape))
    return out


# ---------------------------------------------------------------------------
# reductions


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    out = Tensor._from_op(np.asarray(x.data.sum(axis=axes)), (x,), "sum")
    if out.requires_grad:

        def _backward(g):
            x._accumulate(np.broadcast_to(np.expand_dims(g, axes), x.shape))

        out._backward = _backward
    return out


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = Tensor._from_op(np.asarray(x.data.mean(axis=axes)), (x,), "mean")
    if out.requires_grad:

        def _backward(g):
            x._accumulate(np.broadcast_to(np.expand_dims(g / count, axes), x.shape))

        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# backward pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` (that require grad), parents before children."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from scalar ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedError("backward: loss does not depend on any tensor requiring grad")
    _check_finite(loss.data, "backward")
    loss.grad = np.ones(loss.shape, dtype=DTYPE)
    loss._owned = True
    order = topological_order(loss)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # release the graph; leaves keep their grads
    for node in order:
        if node._parents:
            node._backward = None
            node._parents = ()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
