"""Minimal dense-tensor engine with reverse-mode automatic differentiation."""
from . import nn, ops
from .tensor import (
    NumericalError,
    Tensor,
    as_tensor,
    check_finite,
    dropout_off,
    grad,
    grad_check,
    grad_enabled,
    no_grad,
)

__all__ = [
    "NumericalError",
    "Tensor",
    "as_tensor",
    "check_finite",
    "dropout_off",
    "grad",
    "grad_check",
    "grad_enabled",
    "no_grad",
    "nn",
    "ops",
]
