"""Minimal float64 tensor engine with reverse-mode differentiation."""

from . import ops
from .gradcheck import NondeterministicError, grad_check, grad_check_params, numerical_grad
from .nn import BatchNorm, Conv2d, ConvBNReLU, ConvTranspose2d, Dense, Dropout, Module, Parameter, SeparableConv2d
from .tensor import Graph, ShapeError, Tensor, as_tensor, backward, dumps, loads, no_grad

__all__ = [
    "ops", "Tensor", "Graph", "ShapeError", "as_tensor", "backward", "dumps", "loads", "no_grad",
    "grad_check", "grad_check_params", "numerical_grad", "NondeterministicError",
    "Module", "Parameter", "Dense", "Conv2d", "SeparableConv2d", "ConvTranspose2d", "BatchNorm",
    "ConvBNReLU", "Dropout",
]
