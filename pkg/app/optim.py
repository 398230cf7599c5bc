"""SGD with Nesterov momentum."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from app.errors import NumericError, ShapeError
from app.tensor import Tensor

# Configure logging
logger = logging.getLogger(__name__)

DEFAULT_MOMENTUM = 0.9


@dataclass
class OptimizerState:
    """Learning rate, momentum coefficient and one velocity per parameter."""

    lr: float
    momentum: float = DEFAULT_MOMENTUM
    velocities: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Mapping[str, Tensor], lr: float, momentum: float = DEFAULT_MOMENTUM) -> "OptimizerState":
        return cls(lr=lr, momentum=momentum, velocities={name: np.zeros_like(t.data) for name, t in params.items()})


def sgd_nesterov_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> Tuple[Dict[str, Tensor], OptimizerState]:
    """
    One update v <- beta * v + g; w <- w - lr * (g + beta * v).

    Args:
        params: Trainable tensors by name
        grads: Gradient per parameter name
        state: Current optimizer state

    Returns:
        (new parameter tensors, new optimizer state)

    Raises:
        NumericError: If any gradient is non-finite; nothing is updated
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"sgd_nesterov_step: non-finite gradient for {name}")

    beta, lr = state.momentum, state.lr
    updated: Dict[str, Tensor] = {}
    velocities: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        if name not in grads:
            raise KeyError(f"sgd_nesterov_step: no gradient for parameter {name}")
        grad = np.asarray(grads[name], dtype=param.dtype)
        if grad.shape != param.shape:
            raise ShapeError(f"sgd_nesterov_step: gradient {grad.shape} does not match {name} {param.shape}")
        velocity = state.velocities.get(name)
        if velocity is None:
            velocity = np.zeros_like(param.data)
        velocity = beta * velocity + grad
        step = grad + beta * velocity
        updated[name] = Tensor((param.data - lr * step).astype(param.dtype), requires_grad=param.requires_grad)
        velocities[name] = velocity.astype(param.dtype)
    return updated, OptimizerState(lr=lr, momentum=beta, velocities=velocities)
