"""Tensor with reverse-mode automatic differentiation on numpy arrays.

Every operation records a backward closure; ``backward()`` on a scalar loss
walks the graph in reverse topological order and accumulates gradients into
every tensor with ``requires_grad``. Gradients live in the tensor's own
dtype, so the same graph code runs in float32 for training and float64 for
finite-difference checks.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised on incompatible operand shapes; message carries both shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):  # 0-d reduction results keep their dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad or any(p.needs_grad for p in parents)
        self._parents = parents
        self._backward = backward

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode accumulation from this scalar into all requires_grad leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not node.requires_grad:
                node.grad = None  # free intermediate buffers as soon as they are consumed

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(np.asarray(data), requires_grad=True)


def _toposort(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.needs_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}:shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _broadcast_check(a, b, "sub")
    out = Tensor(a.data - b.data, parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _broadcast_check(a, b, "mul")
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        if a.needs_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.needs_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)
    _broadcast_check(a, b, "div")
    out = Tensor(a.data / b.data, parents=(a, b))

    def backward(g):
        if a.needs_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.needs_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dims broadcast as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} are incompatible")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def backward(g):
        if a.needs_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.multiply.outer(g, b.data)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.needs_grad:
            if a.data.ndim > 1:
                gb = np.swapaxes(a.data, -1, -2) @ g
            else:
                gb = np.multiply.outer(a.data, g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    out._backward = backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    out._backward = backward
    return out


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), parents=(a,))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    out._backward = backward
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    out._backward = backward
    return out


def getitem(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data[idx], parents=(a,))

    def backward(g):
        if a.needs_grad:
            buf = np.zeros_like(a.data)
            buf[idx] += g
            _accumulate(a, buf)

    out._backward = backward
    return out


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,))
    axes = (axis,) if isinstance(axis, int) else axis

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, tuple(ax % a.data.ndim for ax in axes))
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    out._backward = backward
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))
