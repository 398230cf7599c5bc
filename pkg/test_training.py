"""
Tests for the optimizer step, training configs and the four trainers,
including the degenerate settings that must reproduce baseline fine-tuning.
"""

import numpy as np
import pandas as pd
import pytest

from app.checkpoint import Checkpoint, load_checkpoint
from app.data import DataConfig, PipelineConfig, SyntheticSpec, load_splits
from app.distortions import DistortionSpec
from app.errors import ConfigError, NumericError, ShapeError
from app.nn import ModelConfig, build_model
from app.objectives import StabilityWeights
from app.optim import OptimizerState, sgd_nesterov_step
from app.rng import RngStream
from app.tensor import Tensor
from app.training import (
    RunRecord,
    TrainConfig,
    TrainingData,
    augment_mask,
    select_epoch,
    train,
    train_adversarial,
    train_augment,
    train_baseline,
    train_stability,
)

MODEL = ModelConfig(input_shape=(8, 8, 1), num_classes=3, stem_channels=2, stage_blocks=[1, 1], dtype="float64")
SCHEDULE = {"epochs": 2, "batch_size": 5, "lr": 0.05, "seed": 11}


@pytest.fixture(scope="module")
def data() -> TrainingData:
    cfg = DataConfig(
        synthetic=SyntheticSpec(num_classes=3, side=8, channels=1),
        train_per_class=4,
        val_per_class=2,
        test_per_class=1,
    )
    return TrainingData.from_splits(load_splits(cfg, seed=0), PipelineConfig(resize_side=8, crop_side=8))


@pytest.fixture(scope="module")
def baseline() -> Checkpoint:
    return Checkpoint(build_model(MODEL, seed=2), epoch=1, val_score=0.0)


def _assert_same_params(a, b):
    assert list(a) == list(b)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data, err_msg=name)


def _fine_tune(data, baseline):
    return train_baseline(TrainConfig(method="baseline", **SCHEDULE), data, init=baseline.model)


def test_plain_sgd_step():
    """With zero momentum the step is w - lr * g."""
    w = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    updated, _ = sgd_nesterov_step(w, {"w": np.array([1.0])}, OptimizerState.create(w, lr=0.1, momentum=0.0))
    assert updated["w"].data[0] == pytest.approx(0.9)


def test_nesterov_step():
    """With momentum 0.9: v1 = 1 and w1 = 1 - 0.1 * (1 + 0.9) = 0.81."""
    w = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    updated, state = sgd_nesterov_step(w, {"w": np.array([1.0])}, OptimizerState.create(w, lr=0.1, momentum=0.9))
    assert updated["w"].data[0] == pytest.approx(0.81)
    assert state.velocities["w"][0] == pytest.approx(1.0)
    assert updated["w"].requires_grad


def test_zero_learning_rate_keeps_parameters():
    """lr = 0 leaves the parameters unchanged."""
    w = {"w": Tensor(np.array([1.5, -2.0]), requires_grad=True)}
    updated, _ = sgd_nesterov_step(w, {"w": np.array([3.0, 4.0])}, OptimizerState.create(w, lr=0.0))
    np.testing.assert_array_equal(updated["w"].data, [1.5, -2.0])


def test_sgd_rejects_bad_gradients():
    """Non-finite and misshapen gradients are rejected."""
    w = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    state = OptimizerState.create(w, lr=0.1)
    with pytest.raises(NumericError, match="w"):
        sgd_nesterov_step(w, {"w": np.array([np.nan, 0.0])}, state)
    with pytest.raises(ShapeError):
        sgd_nesterov_step(w, {"w": np.array([1.0])}, state)


def test_train_config_validation():
    """Each method takes exactly its own coefficient and a fitting distortion."""
    gauss = DistortionSpec(kind="gaussian", parameter=0.05)
    with pytest.raises(ValueError, match="requires alpha"):
        TrainConfig(method="stability", distortion=gauss)
    with pytest.raises(ValueError, match="does not take alpha"):
        TrainConfig(method="augment", p=0.5, alpha=0.1, distortion=gauss)
    with pytest.raises(ValueError, match="no distortion"):
        TrainConfig(method="baseline", distortion=gauss)
    with pytest.raises(ValueError, match="fgsm"):
        TrainConfig(method="adversarial", mu=0.5, distortion=gauss)
    with pytest.raises(ValueError):
        TrainConfig(method="augment", p=1.5, distortion=gauss)
    with pytest.raises(ValueError):
        TrainConfig(method="stability", alpha=-0.1, distortion=gauss)


def test_run_ids_and_hyperparams():
    """Run ids name the method, the distortion and the coefficient."""
    cfg = TrainConfig(method="stability", alpha=0.01, distortion=DistortionSpec.parse("gaussian:0.05"))
    assert cfg.run_id() == "stability-gaussian0.05-alpha0.01"
    assert cfg.hyperparams() == {"alpha": 0.01, "gaussian": 0.05}
    assert TrainConfig(method="baseline").run_id() == "baseline"


def test_loss_weights_follow_the_method():
    """Each method carries its own coefficient; the others keep their neutral values."""
    gauss = DistortionSpec.parse("gaussian:0.05")
    sym = TrainConfig(method="stability_sym", alpha=0.3, distortion=gauss).weights()
    assert (sym.alpha, sym.mu, sym.symmetric) == (0.3, 1.0, True)
    adversarial = TrainConfig(method="adversarial", mu=0.25, distortion=DistortionSpec.parse("fgsm:0.01")).weights()
    assert (adversarial.alpha, adversarial.mu, adversarial.symmetric) == (0.0, 0.25, False)
    assert TrainConfig(method="augment", p=0.5, distortion=gauss).weights() == StabilityWeights()


def test_rerun_clears_stale_checkpoints(data, tmp_path):
    """A shorter rerun into the same directory leaves only its own epochs."""
    run_dir = tmp_path / "run"
    train_baseline(TrainConfig(method="baseline", **SCHEDULE), data, MODEL, out_dir=run_dir)
    shorter = {**SCHEDULE, "epochs": 1}
    record = train_baseline(TrainConfig(method="baseline", **shorter), data, MODEL, out_dir=run_dir)
    assert sorted(p.name for p in run_dir.glob("epoch_*.ckpt")) == ["epoch_01.ckpt"] == record.checkpoints
    assert len(pd.read_csv(run_dir / "run_log.csv")) == 1


def test_select_epoch_prefers_earliest_tie():
    """The best validation accuracy wins; ties go to the earliest epoch."""
    assert select_epoch([0.5, 0.7, 0.7]) == 2
    assert select_epoch([0.9]) == 1
    with pytest.raises(ValueError):
        select_epoch([])


def test_augment_mask_fraction():
    """Per-sample draws hit p within 2%; per-batch draws are all-or-nothing."""
    root = RngStream(0)
    mask = augment_mask(root, 1, np.arange(5000), 0, 0.3, "per_sample")
    assert mask.mean() == pytest.approx(0.3, abs=0.02)
    batch_mask = augment_mask(root, 1, np.arange(16), 3, 0.5, "per_batch")
    assert batch_mask.all() or not batch_mask.any()
    assert not augment_mask(root, 1, np.arange(100), 0, 0.0, "per_sample").any()


def test_baseline_is_deterministic_and_writes_artifacts(data, tmp_path):
    """Two runs from the same seed agree; checkpoints, run log and record land in the run directory."""
    cfg = TrainConfig(method="baseline", **SCHEDULE)
    first = train_baseline(cfg, data, MODEL, out_dir=tmp_path / "a")
    second = train_baseline(cfg, data, MODEL, out_dir=tmp_path / "b")
    assert [r.train_loss for r in first.epochs] == [r.train_loss for r in second.epochs]
    assert [r.val_acc for r in first.epochs] == [r.val_acc for r in second.epochs]
    _assert_same_params(first.selected_params, second.selected_params)

    run_dir = tmp_path / "a"
    assert first.checkpoints == ["epoch_01.ckpt", "epoch_02.ckpt"]
    log = pd.read_csv(run_dir / "run_log.csv")
    assert list(log.columns) == ["epoch", "train_loss", "val_acc", "wall_time"]
    assert log["epoch"].tolist() == [1, 2]
    assert np.all(np.isfinite(log["train_loss"]))
    record = RunRecord.load(run_dir / "record.yaml")
    assert record.selected_epoch == first.selected_epoch
    assert record.selection_split == "val"
    selected = load_checkpoint(run_dir / first.selected_checkpoint)
    _assert_same_params(selected.model, first.selected_params)


def test_baseline_needs_a_model(data):
    """Without a model config or initial parameters there is nothing to train."""
    with pytest.raises(ConfigError):
        train_baseline(TrainConfig(method="baseline"), data)


def test_stability_alpha_zero_matches_fine_tuning(data, baseline):
    """Stability training with alpha = 0 follows baseline fine-tuning exactly."""
    reference = _fine_tune(data, baseline)
    cfg = TrainConfig(method="stability", alpha=0.0, distortion=DistortionSpec.parse("gaussian:0.1"), **SCHEDULE)
    record = train_stability(cfg, data, baseline)
    assert [r.train_loss for r in record.epochs] == [r.train_loss for r in reference.epochs]
    _assert_same_params(record.selected_params, reference.selected_params)


def test_augment_p_zero_matches_fine_tuning(data, baseline):
    """Augmentation with p = 0 follows baseline fine-tuning exactly."""
    reference = _fine_tune(data, baseline)
    cfg = TrainConfig(method="augment", p=0.0, distortion=DistortionSpec.parse("rotation:30"), **SCHEDULE)
    record = train_augment(cfg, data, baseline)
    _assert_same_params(record.selected_params, reference.selected_params)


def test_adversarial_mu_one_matches_fine_tuning(data, baseline):
    """Adversarial training with mu = 1 follows baseline fine-tuning exactly."""
    reference = _fine_tune(data, baseline)
    cfg = TrainConfig(method="adversarial", mu=1.0, distortion=DistortionSpec.parse("fgsm:0.01"), **SCHEDULE)
    record = train_adversarial(cfg, data, baseline)
    _assert_same_params(record.selected_params, reference.selected_params)


def test_adversarial_zero_epsilon_loss_is_clean_loss(data, baseline):
    """With eps = 0 the adversarial example is the clean input, so the loss is L0 for any mu."""
    reference = _fine_tune(data, baseline)
    cfg = TrainConfig(method="adversarial", mu=0.5, distortion=DistortionSpec.parse("fgsm:0"), **SCHEDULE)
    record = train_adversarial(cfg, data, baseline)
    assert record.epochs[0].train_loss == pytest.approx(reference.epochs[0].train_loss, rel=1e-6)


@pytest.mark.parametrize(
    "method, coefficient, distortion",
    [
        ("stability", {"alpha": 1.0}, "gaussian:0.1"),
        ("stability_sym", {"alpha": 1.0}, "jpeg:30"),
        ("augment", {"p": 1.0}, "thumbnail:4"),
        ("adversarial", {"mu": 0.5}, "fgsm:0.01"),
        ("stability", {"alpha": 0.1}, "gaussian:0.05+rotation:20"),
    ],
)
def test_stabilized_runs_are_finite_and_leave_baseline_alone(data, baseline, method, coefficient, distortion):
    """Every method trains with finite losses and never mutates the baseline checkpoint."""
    before = {name: baseline.model[name].data.copy() for name in baseline.model}
    cfg = TrainConfig(method=method, distortion=DistortionSpec.parse(distortion), **coefficient, **SCHEDULE)
    record = train(cfg, data, baseline)
    assert all(np.isfinite(r.train_loss) for r in record.epochs)
    assert 1 <= record.selected_epoch <= SCHEDULE["epochs"]
    for name in baseline.model:
        np.testing.assert_array_equal(baseline.model[name].data, before[name])


def test_trainer_rejects_label_overflow(data, baseline):
    """Training labels beyond the model's classes are a config error."""
    small = Checkpoint(build_model(MODEL.model_copy(update={"num_classes": 2}), seed=0), epoch=1, val_score=0.0)
    cfg = TrainConfig(method="augment", p=0.5, distortion=DistortionSpec.parse("gaussian:0.1"), **SCHEDULE)
    with pytest.raises(ConfigError):
        train_augment(cfg, data, small)
