"""Adam optimizer state and the partitioned parameter registry."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus hyperparameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, value, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=np.zeros_like(value),
            v=np.zeros_like(value),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(param, grad, state):
    """Apply one bias-corrected Adam update to ``param`` in place.

    Computes ``param -= lr * m_hat / (sqrt(v_hat) + eps)`` with the usual
    bias corrections, via a scratch buffer to keep the pass count low on
    multi-megabyte parameters.
    """
    if param.shape != grad.shape:
        raise ConfigurationError(
            f"gradient shape {grad.shape} does not match parameter {param.shape}"
        )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    scratch = np.empty_like(param)
    np.multiply(grad, 1.0 - b1, out=scratch)
    state.m *= b1
    state.m += scratch
    np.multiply(grad, grad, out=scratch)
    scratch *= 1.0 - b2
    state.v *= b2
    state.v += scratch
    # m_hat / (sqrt(v_hat) + eps) with the corrections folded into scalars
    np.divide(state.v, 1.0 - b2**state.step, out=scratch)
    np.sqrt(scratch, out=scratch)
    scratch += state.eps
    np.divide(state.m, scratch, out=scratch)
    scratch *= state.lr / (1.0 - b1**state.step)
    param -= scratch


@dataclass
class Parameter:
    """A named trainable tensor in exactly one partition."""

    name: str
    tensor: Tensor
    partition: str
    adam: AdamState

    @property
    def value(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


class ParameterSet:
    """Named trainable tensors, each tagged with an immutable partition.

    Partitions let one optimizer instance own a disjoint slice of the model;
    an update applied to one partition never touches another.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name, value, partition, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        tensor = Tensor(value, requires_grad=True)
        self._params[name] = Parameter(
            name=name,
            tensor=tensor,
            partition=partition,
            adam=AdamState.for_param(tensor.data, lr, beta1, beta2, eps),
        )
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def partitions(self):
        return sorted({p.partition for p in self._params.values()})

    def select(self, *partitions):
        tags = set(partitions)
        return [p for p in self._params.values() if p.partition in tags]

    def tensors(self, *partitions):
        params = self.select(*partitions) if partitions else list(self)
        return [p.tensor for p in params]

    def zero_grads(self):
        for p in self._params.values():
            p.tensor.grad = None

    def apply_adam(self, *partitions):
        """Adam-update every parameter (in the given partitions) that has a gradient."""
        for p in self.select(*partitions) if partitions else self:
            if p.tensor.grad is not None:
                adam_step(p.tensor.data, p.tensor.grad, p.adam)

    def total_size(self):
        return sum(p.value.size for p in self._params.values())
