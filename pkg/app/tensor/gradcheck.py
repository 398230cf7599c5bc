"""Central finite-difference checks for the autodiff engine."""

from typing import Callable

import numpy as np


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """
    Central-difference estimate of d fn / d x.

    Args:
        fn: Scalar function of an array
        x: Point of evaluation (not modified)
        h: Step size

    Returns:
        Array with x's shape
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = fn(x)
        flat[i] = original - h
        lower = fn(x)
        flat[i] = original
        out[i] = (upper - lower) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error, guarded against vanishing gradients."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)
