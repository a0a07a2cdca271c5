"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient accumulator. Every
primitive records its parents and a backward rule; calling ``backward()`` on
a scalar result walks the recorded graph in reverse topological order and
accumulates gradients into every tensor with ``requires_grad``.

All data is kept in double precision so finite-difference checks are
meaningful. Backward rules return one gradient per parent (or None);
accumulation itself lives in ``Tensor.backward``.
"""

from __future__ import annotations

import numpy as np

from . import _kernels


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward_fn = _backward_fn

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

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data) if self.grad is None else self.grad
        for node in reversed(topo):
            if node._backward_fn is None:
                continue
            grads = node._backward_fn(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(x, requires_grad=True)


# -- arithmetic ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out_data, _parents=(a, b), _backward_fn=backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.data - b.data, _parents=(a, b), _backward_fn=backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, _parents=(a, b), _backward_fn=backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor(a.data / b.data, _parents=(a, b), _backward_fn=backward)


def neg(a) -> Tensor:
    a = _wrap(a)
    return Tensor(-a.data, _parents=(a,), _backward_fn=lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    n = float(exponent)

    def backward(g):
        return (g * n * np.power(a.data, n - 1.0),)

    return Tensor(np.power(a.data, n), _parents=(a,), _backward_fn=backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor(np.matmul(a.data, b.data), _parents=(a, b), _backward_fn=backward)


# -- elementwise nonlinearities -------------------------------------------


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)
    return Tensor(out_data, _parents=(a,), _backward_fn=lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = _wrap(a)
    return Tensor(np.log(a.data), _parents=(a,), _backward_fn=lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)
    return Tensor(out_data, _parents=(a,), _backward_fn=lambda g: (g / (2.0 * out_data),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor(np.where(mask, a.data, 0.0), _parents=(a,), _backward_fn=backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor(out_data, _parents=(a,), _backward_fn=backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; gradient passes through inside the range."""
    a = _wrap(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * mask,)

    return Tensor(np.clip(a.data, lo, hi), _parents=(a,), _backward_fn=backward)


def absolute(a) -> Tensor:
    a = _wrap(a)
    s = np.sign(a.data)
    return Tensor(np.abs(a.data), _parents=(a,), _backward_fn=lambda g: (g * s,))


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient goes to the first argument."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return Tensor(np.where(take_a, a.data, b.data), _parents=(a, b), _backward_fn=backward)


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return Tensor(np.where(take_a, a.data, b.data), _parents=(a, b), _backward_fn=backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor(out_data, _parents=(a,), _backward_fn=backward)


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor(out_data, _parents=(a,), _backward_fn=backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[i] for i in axis]))
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ----------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return Tensor(a.data.reshape(shape), _parents=(a,), _backward_fn=lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return Tensor(np.transpose(a.data, axes), _parents=(a,), _backward_fn=backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _parents=tuple(tensors),
        _backward_fn=backward,
    )


def getitem(a, idx) -> Tensor:
    a = _wrap(a)

    def backward(g):
        ga = np.zeros(a.shape, dtype=np.float64)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor(a.data[idx], _parents=(a,), _backward_fn=backward)


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0 by an integer index array."""
    idx = np.asarray(indices, dtype=np.int64)
    return getitem(a, idx)


# -- kernel-backed primitives ---------------------------------------------


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution of an (H, W, Cin) map with (kh, kw, Cin, Cout) weights."""
    x, w = _wrap(x), _wrap(w)

    def backward(g):
        gx, gw = _kernels.conv2d_backward(x.data, w.data, g, stride, pad)
        return gx, gw

    return Tensor(
        _kernels.conv2d_forward(x.data, w.data, stride, pad),
        _parents=(x, w),
        _backward_fn=backward,
    )


def bilinear_sample(m, pts) -> Tensor:
    """Sample an (H, W, C) map at (P, 2) pixel coordinates (x, y).

    Integer coordinates hit grid centers; neighbours outside the map
    contribute zero (zero padding). Differentiable in both the map and the
    points.
    """
    m, pts = _wrap(m), _wrap(pts)

    def backward(g):
        gm, gpts = _kernels.bilinear_backward(m.data, pts.data, g)
        return gm, gpts

    return Tensor(
        _kernels.bilinear_forward(m.data, pts.data),
        _parents=(m, pts),
        _backward_fn=backward,
    )
