"""Minimal differentiable-computation engine on numpy arrays."""

from .tensor import Tensor, as_tensor, no_grad, grad_enabled, assert_finite
from .ops import (
    add,
    sub,
    mul,
    square,
    tsum,
    tmean,
    maximum,
    reshape,
    flatten,
    transpose,
    stack,
    concatenate,
    softmax,
)
from .layers import (
    conv2d,
    conv_output_size,
    dense,
    relu,
    leaky_relu,
    sigmoid,
    dropout,
    softmax_cross_entropy,
    sigmoid_cross_entropy,
    squared_error,
    truncated_normal,
    init_conv_kernel,
    init_dense_weights,
    zeros,
)
from .optim import AdamState, adam_step, Parameter, ParameterSet
from .gradcheck import grad_check, GradCheckResult

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "assert_finite",
    "add",
    "sub",
    "mul",
    "square",
    "tsum",
    "tmean",
    "maximum",
    "reshape",
    "flatten",
    "transpose",
    "stack",
    "concatenate",
    "softmax",
    "conv2d",
    "conv_output_size",
    "dense",
    "relu",
    "leaky_relu",
    "sigmoid",
    "dropout",
    "softmax_cross_entropy",
    "sigmoid_cross_entropy",
    "squared_error",
    "truncated_normal",
    "init_conv_kernel",
    "init_dense_weights",
    "zeros",
    "AdamState",
    "adam_step",
    "Parameter",
    "ParameterSet",
    "grad_check",
    "GradCheckResult",
]
