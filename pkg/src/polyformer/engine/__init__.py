"""Minimal numpy tensor library with reverse-mode differentiation."""

from . import ops
from .gradcheck import grad_check, grad_check_params
from .ops import matmul, softmax, softmax_axis, conv2d
from .rng import rng_for
from .tensor import (
    ContractError,
    DimensionError,
    NumericError,
    Tape,
    Tensor,
    backward,
    current_tape,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
)

__all__ = [
    "ContractError", "DimensionError", "NumericError", "Tape", "Tensor", "backward",
    "conv2d", "current_tape", "default_dtype", "grad_check", "grad_check_params",
    "grad_enabled", "matmul", "no_grad", "ops", "precision", "rng_for", "softmax",
    "softmax_axis",
]
