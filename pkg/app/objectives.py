"""Task, stability and adversarial-training objectives.

Probability-vector functions (cross_entropy, kl_divergence, sym_kl) work on
likelihoods directly. The training losses consume logits and go through
log-softmax; every batch term is reduced by the mean over the batch.
"""

import logging
from typing import Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.errors import ShapeError
from app.tensor import Tensor
from app.tensor import ops

# Configure logging
logger = logging.getLogger(__name__)

Likelihood = Union[np.ndarray, Sequence[float]]
Scalar = Union[Tensor, float]

SIMPLEX_TOLERANCE = 1e-6


class StabilityWeights(BaseModel):
    """Loss coefficients: alpha weighs the stability term, mu the clean term of AT."""

    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(0.0, ge=0.0)
    mu: float = Field(1.0, ge=0.0, le=1.0)
    symmetric: bool = False


def _likelihood(p: Likelihood, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ShapeError(f"{name}: likelihood must be a non-empty vector, got shape {p.shape}")
    if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise ValueError(f"{name}: not a probability vector (sum={p.sum():.8f})")
    return p


def _pair(p: Likelihood, q: Likelihood, name: str):
    p, q = _likelihood(p, name), _likelihood(q, name)
    if p.shape != q.shape:
        raise ShapeError(f"{name}: likelihood lengths differ, {p.shape} vs {q.shape}")
    return p, q


def cross_entropy(probs: Likelihood, label: int) -> float:
    """
    Negative log-likelihood of the labelled class, in nats.

    Args:
        probs: Class probabilities
        label: Reference class index

    Returns:
        Non-negative loss value
    """
    p = _likelihood(probs, "cross_entropy")
    if not 0 <= int(label) < p.size:
        raise ValueError(f"cross_entropy: label {label} outside [0, {p.size})")
    return float(0.0 - np.log(p[int(label)]))


def kl_divergence(p: Likelihood, q: Likelihood) -> float:
    """KL(p || q) in nats with the convention 0 * log 0 = 0."""
    p, q = _pair(p, q, "kl_divergence")
    support = p > 0
    value = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
    # rounding can push near-identical pairs a hair below zero
    return max(value, 0.0)


def sym_kl(p: Likelihood, q: Likelihood) -> float:
    """Symmetrized divergence 1/2 (KL(p || q) + KL(q || p))."""
    return 0.5 * (kl_divergence(p, q) + kl_divergence(q, p))


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"task_loss: logits {logits.shape} do not match labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"task_loss: labels outside [0, {logits.shape[1]})")
    return labels


def task_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Batch-mean cross-entropy L0 computed from logits.

    Args:
        logits: (N, C) network outputs
        labels: (N,) reference class indices

    Returns:
        Scalar tensor
    """
    labels = _check_labels(logits, labels)
    onehot = Tensor(np.eye(logits.shape[1], dtype=logits.dtype)[labels])
    log_probs = ops.log_softmax(logits)
    return -ops.mean(ops.sum(onehot * log_probs, axis=1))


def _kl_from_logits(reference: Tensor, other: Tensor) -> Tensor:
    log_p = ops.log_softmax(reference)
    log_q = ops.log_softmax(other)
    per_sample = ops.sum(ops.exp(log_p) * (log_p - log_q), axis=1)
    return ops.mean(per_sample)


def stability_loss(
    logits_ref: Tensor,
    logits_perturbed: Tensor,
    symmetric: bool = False,
    detach_reference: bool = False,
) -> Tensor:
    """
    Divergence between predictions on reference and perturbed inputs.

    Gradients flow through both branches unless detach_reference is set.

    Args:
        logits_ref: Logits f(x) of the reference batch
        logits_perturbed: Logits f(x') of the perturbed batch
        symmetric: Use the symmetrized divergence instead of KL(f(x) || f(x'))
        detach_reference: Block gradients through the reference branch

    Returns:
        Scalar tensor
    """
    if logits_ref.shape != logits_perturbed.shape:
        raise ShapeError(f"stability_loss: logits shapes differ, {logits_ref.shape} vs {logits_perturbed.shape}")
    if detach_reference:
        logits_ref = logits_ref.detach()
    forward = _kl_from_logits(logits_ref, logits_perturbed)
    if not symmetric:
        return forward
    return (forward + _kl_from_logits(logits_perturbed, logits_ref)) * 0.5


def combined_loss(l0: Scalar, l_stab: Scalar, alpha: float) -> Scalar:
    """Stability-training objective L0 + alpha * L_stab."""
    if alpha < 0:
        raise ValueError(f"combined_loss: alpha must be >= 0, got {alpha}")
    return l0 + l_stab * alpha


def adversarial_objective(l_clean: Scalar, l_adv: Scalar, mu: float) -> Scalar:
    """Adversarial-training objective mu * L0(x) + (1 - mu) * L0(x')."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"adversarial_objective: mu must lie in [0, 1], got {mu}")
    return l_clean * mu + l_adv * (1.0 - mu)
