"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray together with the bookkeeping needed to
backpropagate: a list of parent tensors and, for each, a vector-Jacobian
product closure. Calling ``backward()`` on a scalar walks the graph in
reverse topological order and accumulates gradients into ``.grad``.

Everything runs in the dtype of the underlying arrays; float64 is the
default carrier so finite-difference checks are decisive, float32 is used
by the scaled-down training configurations.
"""
from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (frozen-model evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """An ndarray plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad=False, parents=()):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        if _grad_enabled:
            self.requires_grad = bool(requires_grad) or any(
                p.requires_grad for p, _ in parents
            )
            self._parents = tuple((p, fn) for p, fn in parents if p.requires_grad)
        else:
            self.requires_grad = False
            self._parents = ()

    # -- introspection -------------------------------------------------

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

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar; overwrites ``.grad`` on reachable nodes."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo = _toposort(self)
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib

    def zero_grad(self):
        self.grad = None

    # -- operator sugar (delegates to ops; import deferred to avoid cycle)

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)


def as_tensor(x):
    """Wrap a value as a constant Tensor; pass Tensors through unchanged."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    """Iterative DFS topological order of the subgraph below ``root``."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def assert_finite(t, context=""):
    """Raise if any element is NaN/Inf; forward and backward passes must stay finite."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        where = np.argwhere(~np.isfinite(data))
        raise FloatingPointError(
            f"non-finite value{' in ' + context if context else ''} "
            f"at index {tuple(where[0])}"
        )
