"""Primitive differentiable operations: arithmetic, reductions, shaping."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_scalar(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b):
    # python scalars stay raw so they never promote float32 graphs
    if _is_scalar(b) and isinstance(a, Tensor):
        return Tensor(a.data + b, parents=((a, lambda g: g),))
    if _is_scalar(a) and isinstance(b, Tensor):
        return Tensor(b.data + a, parents=((b, lambda g: g),))
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ),
    )


def sub(a, b):
    if _is_scalar(b) and isinstance(a, Tensor):
        return Tensor(a.data - b, parents=((a, lambda g: g),))
    if _is_scalar(a) and isinstance(b, Tensor):
        return Tensor(a - b.data, parents=((b, lambda g: -g),))
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        parents=(
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ),
    )


def mul(a, b):
    if _is_scalar(b) and isinstance(a, Tensor):
        return Tensor(a.data * b, parents=((a, lambda g: g * b),))
    if _is_scalar(a) and isinstance(b, Tensor):
        return Tensor(b.data * a, parents=((b, lambda g: g * a),))
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ),
    )


def square(a):
    a = as_tensor(a)
    return Tensor(a.data * a.data, parents=((a, lambda g: g * (2.0 * a.data)),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return Tensor(out, parents=((a, vjp),))


def tmean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    a_wins = a.data >= b.data
    return Tensor(
        np.where(a_wins, a.data, b.data),
        parents=(
            (a, lambda g: _unbroadcast(np.where(a_wins, g, 0.0), a.data.shape)),
            (b, lambda g: _unbroadcast(np.where(a_wins, 0.0, g), b.data.shape)),
        ),
    )


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(
        a.data.reshape(shape), parents=((a, lambda g: g.reshape(a.data.shape)),)
    )


def flatten(a, keep_batch=True):
    a = as_tensor(a)
    if keep_batch and a.ndim > 1:
        return reshape(a, (a.shape[0], -1))
    return reshape(a, (-1,))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return Tensor(
        a.data.transpose(axes),
        parents=((a, lambda g: g.transpose(inverse)),),
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor(out, parents=tuple((t, make_vjp(i)) for i, t in enumerate(tensors)))


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return Tensor(out, parents=tuple((t, make_vjp(i)) for i, t in enumerate(tensors)))


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return s * (g - dot)

    return Tensor(s, parents=((a, vjp),))
