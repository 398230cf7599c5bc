"""
Tests for the loss functions: cross-entropy, KL divergences, stability
loss and the combined ST / AT objectives.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.errors import ShapeError
from app.objectives import (
    StabilityWeights,
    adversarial_objective,
    combined_loss,
    cross_entropy,
    kl_divergence,
    stability_loss,
    sym_kl,
    task_loss,
)
from app.tensor import Tensor
from app.tensor.gradcheck import numerical_gradient, relative_error


@st.composite
def likelihoods(draw, size: int = 4):
    """Strictly positive probability vectors of a fixed length."""
    weights = draw(st.lists(st.floats(0.05, 10.0), min_size=size, max_size=size))
    p = np.asarray(weights, dtype=np.float64)
    return p / p.sum()


def _logits(p) -> Tensor:
    return Tensor(np.log(np.asarray([p], dtype=np.float64)))


def test_cross_entropy_examples():
    """One-hot gives 0, uniform gives ln C, (0.7, 0.2, 0.1) gives 0.356675."""
    assert cross_entropy([0.0, 1.0, 0.0], 1) == 0.0
    assert cross_entropy([0.25] * 4, 2) == pytest.approx(math.log(4))
    assert cross_entropy([0.7, 0.2, 0.1], 0) == pytest.approx(0.356675, abs=1e-6)


def test_cross_entropy_rejects_bad_input():
    """Labels outside the class range and non-probability vectors are rejected."""
    with pytest.raises(ValueError):
        cross_entropy([0.5, 0.5], 2)
    with pytest.raises(ValueError):
        cross_entropy([0.5, 0.6], 0)


def test_kl_examples():
    """KL((0.5, 0.5) || (0.9, 0.1)) = 0.510826 and the reverse is 0.368064."""
    p, q = [0.5, 0.5], [0.9, 0.1]
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence(p, q) == pytest.approx(0.510826, abs=1e-6)
    assert kl_divergence(q, p) == pytest.approx(0.368064, abs=1e-6)
    assert sym_kl(p, q) == pytest.approx(0.439445, abs=1e-6)


def test_kl_zero_mass_convention():
    """Entries with p = 0 contribute nothing."""
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))


def test_kl_length_mismatch():
    """Vectors of different lengths are rejected."""
    with pytest.raises(ShapeError):
        kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])


@settings(max_examples=1000, deadline=None)
@given(likelihoods(), likelihoods())
def test_gibbs_inequality(p, q):
    """KL is non-negative and zero on identical pairs."""
    assert kl_divergence(p, q) >= 0.0
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=1000, deadline=None)
@given(likelihoods(), likelihoods())
def test_sym_kl_is_symmetric(p, q):
    """The symmetrized divergence does not depend on argument order."""
    assert sym_kl(p, q) == pytest.approx(sym_kl(q, p), rel=1e-12, abs=1e-15)


def test_stability_loss_values():
    """Stability loss on logits of the (0.5, 0.5) / (0.9, 0.1) pair reproduces the KL values."""
    ref, pert = _logits([0.5, 0.5]), _logits([0.9, 0.1])
    assert float(stability_loss(ref, ref).data) == pytest.approx(0.0, abs=1e-12)
    assert float(stability_loss(ref, pert).data) == pytest.approx(0.510826, abs=1e-6)
    assert float(stability_loss(ref, pert, symmetric=True).data) == pytest.approx(0.439445, abs=1e-6)


def test_stability_loss_gradient():
    """The stability loss gradient matches finite differences for both branches."""
    rng = np.random.default_rng(2)
    ref_values = rng.normal(size=(3, 4))
    pert_values = rng.normal(size=(3, 4))
    for symmetric in (False, True):
        ref = Tensor(ref_values.copy(), requires_grad=True)
        pert = Tensor(pert_values.copy(), requires_grad=True)
        stability_loss(ref, pert, symmetric=symmetric).backward()
        numeric_ref = numerical_gradient(
            lambda v: float(stability_loss(Tensor(v), Tensor(pert_values), symmetric=symmetric).data), ref_values
        )
        numeric_pert = numerical_gradient(
            lambda v: float(stability_loss(Tensor(ref_values), Tensor(v), symmetric=symmetric).data), pert_values
        )
        assert relative_error(ref.grad, numeric_ref) < 1e-5
        assert relative_error(pert.grad, numeric_pert) < 1e-5


def test_detached_reference_gets_no_gradient():
    """detach_reference blocks the gradient through f(x)."""
    ref = Tensor(np.array([[0.2, -0.4, 1.0]]), requires_grad=True)
    pert = Tensor(np.array([[0.1, 0.3, -0.2]]), requires_grad=True)
    stability_loss(ref, pert, detach_reference=True).backward()
    assert ref.grad is None
    assert pert.grad is not None


def test_task_loss_is_batch_mean():
    """Batch cross-entropy is the mean of the per-sample values."""
    probs = np.array([[0.7, 0.2, 0.1], [0.25, 0.5, 0.25]])
    value = float(task_loss(Tensor(np.log(probs)), np.array([0, 1])).data)
    assert value == pytest.approx((0.356675 + math.log(2)) / 2, abs=1e-6)


def test_task_loss_rejects_mismatched_labels():
    """Label count must match the batch."""
    with pytest.raises(ShapeError):
        task_loss(Tensor(np.zeros((2, 3))), np.array([0]))


def test_combined_loss():
    """L0 + alpha * Lstab; alpha = 0 leaves L0; negative alpha is rejected."""
    assert combined_loss(1.0, 0.5, 0.01) == pytest.approx(1.005)
    assert combined_loss(1.0, 0.5, 0.0) == 1.0
    with pytest.raises(ValueError):
        combined_loss(1.0, 0.5, -0.1)


def test_adversarial_objective():
    """mu weighs the clean term; mu outside [0, 1] is rejected."""
    assert adversarial_objective(0.4, 0.8, 0.5) == pytest.approx(0.6)
    assert adversarial_objective(0.4, 0.8, 1.0) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        adversarial_objective(0.4, 0.8, 1.5)


def test_weights_validation():
    """Negative alpha and mu above one fail validation."""
    with pytest.raises(ValueError):
        StabilityWeights(alpha=-1.0)
    with pytest.raises(ValueError):
        StabilityWeights(mu=2.0)
