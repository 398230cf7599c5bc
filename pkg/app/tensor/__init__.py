"""Dense tensors with reverse-mode automatic differentiation."""

from app.tensor.core import (
    DEFAULT_DTYPE,
    Function,
    Tensor,
    backward,
    input_gradient,
    is_grad_enabled,
    no_grad,
)

__all__ = [
    "DEFAULT_DTYPE",
    "Function",
    "Tensor",
    "backward",
    "input_gradient",
    "is_grad_enabled",
    "no_grad",
]
