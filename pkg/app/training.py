"""
Training procedures: baseline, stability training, data augmentation and
adversarial training, sharing one epoch loop with early stopping on the
undistorted validation split.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, get_args

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

from app.checkpoint import Checkpoint, save_checkpoint
from app.data import ChannelStats, DataSplits, PipelineConfig, PreparedSplit, compute_stats, normalize
from app.distortions import ClassifierContext, DistortionSpec
from app.errors import ConfigError, NumericError
from app.nn import ModelConfig, ModelParams, accuracy, build_model, predict
from app.objectives import StabilityWeights, adversarial_objective, combined_loss, stability_loss, task_loss
from app.optim import DEFAULT_MOMENTUM, OptimizerState, sgd_nesterov_step
from app.rng import BERNOULLI, DISTORT, SHUFFLE, RngStream
from app.tensor import Tensor, backward

# Configure logging
logger = logging.getLogger(__name__)

Method = Literal["baseline", "stability", "stability_sym", "augment", "adversarial"]
METHODS = get_args(Method)

# hyperparameter each method requires besides the distortion
METHOD_PARAMETER = {"stability": "alpha", "stability_sym": "alpha", "augment": "p", "adversarial": "mu"}

RUN_LOG_COLUMNS = ["epoch", "train_loss", "val_acc", "wall_time"]


class TrainConfig(BaseModel):
    """One training run: method, its hyperparameters, schedule and seed."""

    model_config = ConfigDict(extra="forbid")

    method: Method
    alpha: Optional[float] = Field(None, ge=0.0)
    p: Optional[float] = Field(None, ge=0.0, le=1.0)
    mu: Optional[float] = Field(None, ge=0.0, le=1.0)
    distortion: Optional[DistortionSpec] = None
    epochs: int = Field(15, ge=1)
    batch_size: int = Field(128, ge=1)
    lr: float = Field(0.01, ge=0.0)
    momentum: float = Field(DEFAULT_MOMENTUM, ge=0.0, lt=1.0)
    seed: int = 0
    detach_reference: bool = False
    draw: Literal["per_sample", "per_batch"] = "per_sample"

    @model_validator(mode="after")
    def _method_parameters(self) -> "TrainConfig":
        required = METHOD_PARAMETER.get(self.method)
        for name in ("alpha", "p", "mu"):
            value = getattr(self, name)
            if name == required and value is None:
                raise ValueError(f"method {self.method} requires {name}")
            if name != required and value is not None:
                raise ValueError(f"method {self.method} does not take {name}")
        if self.method == "baseline":
            if self.distortion is not None:
                raise ValueError("method baseline trains on undistorted data and takes no distortion")
        elif self.distortion is None:
            raise ValueError(f"method {self.method} requires a distortion")
        if self.method == "adversarial" and self.distortion.kind != "fgsm":
            raise ValueError(f"method adversarial needs an fgsm distortion, got {self.distortion.kind}")
        return self

    def hyperparams(self) -> Dict[str, float]:
        """Method coefficient plus the distortion parameters, by name."""
        values: Dict[str, float] = {}
        required = METHOD_PARAMETER.get(self.method)
        if required:
            values[required] = getattr(self, required)
        if self.distortion is not None:
            children = self.distortion.children if self.distortion.kind == "compose" else (self.distortion,)
            for child in children:
                values[child.kind] = child.parameter
        return values

    def weights(self) -> StabilityWeights:
        """Loss coefficients of the method; unused ones keep their neutral values."""
        return StabilityWeights(
            alpha=self.alpha if self.alpha is not None else 0.0,
            mu=self.mu if self.mu is not None else 1.0,
            symmetric=self.method == "stability_sym",
        )

    def run_id(self) -> str:
        if self.method == "baseline":
            return "baseline"
        slug = self.distortion.label().replace(":", "")
        name = METHOD_PARAMETER[self.method]
        return f"{self.method}-{slug}-{name}{getattr(self, name):g}"


class EpochRow(BaseModel):
    epoch: int
    train_loss: float
    val_acc: float
    wall_time: float


class RunRecord(BaseModel):
    """
    Outcome of one training run.

    The selected epoch maximizes undistorted validation accuracy; ties go
    to the earliest epoch.
    """

    config: TrainConfig
    epochs: List[EpochRow]
    selected_epoch: int
    checkpoints: List[str] = Field(default_factory=list)
    selection_split: Literal["val"] = "val"
    selection_distortion: Optional[str] = None

    _selected: Optional[ModelParams] = PrivateAttr(default=None)

    @property
    def run_id(self) -> str:
        return self.config.run_id()

    @property
    def selected_params(self) -> Optional[ModelParams]:
        return self._selected

    @property
    def selected_checkpoint(self) -> Optional[str]:
        if not self.checkpoints:
            return None
        return self.checkpoints[self.selected_epoch - 1]

    def save(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.model_dump(mode="json"), f, sort_keys=True)

    @classmethod
    def load(cls, path: Path) -> "RunRecord":
        with open(path, "r", encoding="utf-8") as f:
            return cls.model_validate(yaml.safe_load(f))


def select_epoch(val_accs: List[float]) -> int:
    """1-based epoch with the highest accuracy, earliest on ties."""
    if not val_accs:
        raise ValueError("select_epoch: no epochs")
    return int(np.argmax(val_accs)) + 1


@dataclass
class TrainingData:
    """Prepared train / val splits with their normalization statistics."""

    train: PreparedSplit
    val: PreparedSplit
    stats: ChannelStats
    _val_cache: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def from_splits(cls, splits: DataSplits, pipeline: PipelineConfig) -> "TrainingData":
        train = PreparedSplit(splits.train, pipeline)
        val = PreparedSplit(splits.val, pipeline)
        return cls(train=train, val=val, stats=compute_stats(train.centered))

    def clean(self, indices: np.ndarray, dtype: str) -> np.ndarray:
        return normalize(self.train.centered[indices], self.stats, dtype)

    def val_images(self, dtype: str) -> np.ndarray:
        if dtype not in self._val_cache:
            self._val_cache[dtype] = normalize(self.val.centered, self.stats, dtype)
        return self._val_cache[dtype]


def append_run_log(path: Path, row: EpochRow) -> None:
    """Append one epoch to the run log CSV, writing the header on first use."""
    frame = pd.DataFrame([row.model_dump()], columns=RUN_LOG_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)


def augment_mask(root: RngStream, epoch: int, indices: np.ndarray, batch_index: int, p: float, draw: str) -> np.ndarray:
    """Which samples of a batch are replaced by their distorted version."""
    if draw == "per_batch":
        return np.full(len(indices), root.child(BERNOULLI, epoch, batch_index).random() < p)
    return np.array([root.child(BERNOULLI, epoch, int(i)).random() < p for i in indices], dtype=bool)


# (params, batch indices, epoch, batch index) -> scalar loss
StepLoss = Callable[[ModelParams, np.ndarray, int, int], Tensor]


class _Trainer:
    """Epoch loop shared by every method."""

    def __init__(self, cfg: TrainConfig, data: TrainingData, params: ModelParams, out_dir: Optional[Path]):
        self.cfg = cfg
        self.data = data
        self.params = params
        self.dtype = params.config.dtype
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.root = RngStream(cfg.seed)
        if data.train.labels.size and data.train.labels.max() >= params.config.num_classes:
            raise ConfigError(
                f"training labels reach {data.train.labels.max()} but the model has {params.config.num_classes} classes"
            )

    def distort_streams(self, epoch: int, indices: np.ndarray) -> List[RngStream]:
        return [self.root.child(DISTORT, epoch, int(i)) for i in indices]

    def distorted(self, indices: np.ndarray, epoch: int, ctx: Optional[ClassifierContext] = None) -> np.ndarray:
        images = self.data.train.batch(
            indices, self.cfg.distortion, self.distort_streams(epoch, indices), ctx, fill=self.data.stats.mean
        )
        return normalize(images, self.data.stats, self.dtype)

    def context(self) -> ClassifierContext:
        return ClassifierContext(self.params, self.data.stats.mean, self.data.stats.std)

    def step(self, loss: Tensor, state: OptimizerState, epoch: int, batch_index: int) -> OptimizerState:
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"{self.cfg.run_id()}: non-finite loss {value} at epoch {epoch} step {batch_index}")
        trainable = self.params.trainable()
        for tensor in trainable.values():
            tensor.zero_grad()
        backward(loss)
        grads = {name: t.grad if t.grad is not None else np.zeros_like(t.data) for name, t in trainable.items()}
        try:
            updated, state = sgd_nesterov_step(trainable, grads, state)
        except NumericError as e:
            raise NumericError(f"{self.cfg.run_id()}: {e} at epoch {epoch} step {batch_index}") from e
        self.params.tensors.update(updated)
        return state

    def fit(self, step_loss: StepLoss) -> RunRecord:
        cfg = self.cfg
        run_id = cfg.run_id()
        state = OptimizerState.create(self.params.trainable(), cfg.lr, cfg.momentum)
        n = len(self.data.train)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / "run_log.csv"
            if log_path.exists():
                log_path.unlink()
            for stale in sorted(self.out_dir.glob("epoch_*.ckpt")):
                logger.warning(f"[{run_id}] removing stale checkpoint {stale.name}")
                stale.unlink()

        rows: List[EpochRow] = []
        checkpoints: List[str] = []
        best: Optional[ModelParams] = None
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            order = self.root.child(SHUFFLE, epoch).permutation(n)
            total = 0.0
            for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
                indices = order[start:start + cfg.batch_size]
                loss = step_loss(self.params, indices, epoch, batch_index)
                state = self.step(loss, state, epoch, batch_index)
                total += loss.item() * len(indices)

            val_acc = accuracy(self.params, self.data.val_images(self.dtype), self.data.val.labels)
            row = EpochRow(
                epoch=epoch,
                train_loss=total / max(n, 1),
                val_acc=val_acc,
                wall_time=round(time.perf_counter() - started, 3),
            )
            rows.append(row)
            logger.info(f"[{run_id}] epoch {epoch}/{cfg.epochs} loss {row.train_loss:.4f} val_acc {val_acc:.4f}")

            if best is None or val_acc > max(r.val_acc for r in rows[:-1]):
                best = self.params.copy()
            if self.out_dir is not None:
                path = self.out_dir / f"epoch_{epoch:02d}.ckpt"
                save_checkpoint(Checkpoint(self.params, epoch, val_acc, state), path)
                checkpoints.append(path.name)
                append_run_log(self.out_dir / "run_log.csv", row)

        record = RunRecord(
            config=cfg,
            epochs=rows,
            selected_epoch=select_epoch([r.val_acc for r in rows]),
            checkpoints=checkpoints,
        )
        record._selected = best
        logger.info(
            f"[{run_id}] selected epoch {record.selected_epoch} "
            f"(val_acc {rows[record.selected_epoch - 1].val_acc:.4f})"
        )
        if self.out_dir is not None:
            record.save(self.out_dir / "record.yaml")
        return record


def _require_method(cfg: TrainConfig, *methods: str) -> None:
    if cfg.method not in methods:
        raise ConfigError(f"expected method {' or '.join(methods)}, got {cfg.method}")


def train_baseline(
    cfg: TrainConfig,
    data: TrainingData,
    model: Optional[ModelConfig] = None,
    out_dir: Optional[Path] = None,
    init: Optional[ModelParams] = None,
) -> RunRecord:
    """
    Train with the task loss on undistorted data.

    Starts from `init` when given (baseline fine-tuning), otherwise from a
    fresh model seeded by cfg.seed.
    """
    _require_method(cfg, "baseline")
    if init is None and model is None:
        raise ConfigError("train_baseline needs a model config or initial parameters")
    params = init.copy() if init is not None else build_model(model, cfg.seed)
    trainer = _Trainer(cfg, data, params, out_dir)

    def step_loss(p: ModelParams, indices: np.ndarray, epoch: int, batch_index: int) -> Tensor:
        logits = predict(p, trainer.data.clean(indices, trainer.dtype), train=True)
        return task_loss(logits, data.train.labels[indices])

    return trainer.fit(step_loss)


def train_stability(cfg: TrainConfig, data: TrainingData, baseline: Checkpoint, out_dir: Optional[Path] = None) -> RunRecord:
    """
    Stability training: L0(x) + alpha * D(f(x), f(x')).

    Both batches are forwarded in train mode; only the clean forward updates
    the running statistics and only the clean batch enters L0.
    """
    _require_method(cfg, "stability", "stability_sym")
    trainer = _Trainer(cfg, data, baseline.model.copy(), out_dir)
    weights = cfg.weights()
    needs_context = "fgsm" in cfg.distortion.kinds()

    def step_loss(p: ModelParams, indices: np.ndarray, epoch: int, batch_index: int) -> Tensor:
        ctx = trainer.context() if needs_context else None
        perturbed = trainer.distorted(indices, epoch, ctx)
        logits = predict(p, trainer.data.clean(indices, trainer.dtype), train=True)
        logits_perturbed = predict(p, perturbed, train=True, update_stats=False)
        l0 = task_loss(logits, data.train.labels[indices])
        l_stab = stability_loss(
            logits,
            logits_perturbed,
            symmetric=weights.symmetric,
            detach_reference=cfg.detach_reference,
        )
        return combined_loss(l0, l_stab, weights.alpha)

    return trainer.fit(step_loss)


def train_augment(cfg: TrainConfig, data: TrainingData, baseline: Checkpoint, out_dir: Optional[Path] = None) -> RunRecord:
    """Data augmentation: each sample is distorted with probability p, loss L0."""
    _require_method(cfg, "augment")
    trainer = _Trainer(cfg, data, baseline.model.copy(), out_dir)
    needs_context = "fgsm" in cfg.distortion.kinds()

    def step_loss(p: ModelParams, indices: np.ndarray, epoch: int, batch_index: int) -> Tensor:
        images = trainer.data.clean(indices, trainer.dtype)
        mask = augment_mask(trainer.root, epoch, indices, batch_index, cfg.p, cfg.draw)
        if mask.any():
            ctx = trainer.context() if needs_context else None
            images = images.copy()
            images[mask] = trainer.distorted(indices[mask], epoch, ctx)
        logits = predict(p, images, train=True)
        return task_loss(logits, data.train.labels[indices])

    return trainer.fit(step_loss)


def train_adversarial(cfg: TrainConfig, data: TrainingData, baseline: Checkpoint, out_dir: Optional[Path] = None) -> RunRecord:
    """
    Adversarial training: mu * L0(x) + (1 - mu) * L0(x').

    x' is an FGSM example of the current parameters, generated in eval mode
    and treated as a constant input.
    """
    _require_method(cfg, "adversarial")
    trainer = _Trainer(cfg, data, baseline.model.copy(), out_dir)
    weights = cfg.weights()

    def step_loss(p: ModelParams, indices: np.ndarray, epoch: int, batch_index: int) -> Tensor:
        adversarial = trainer.distorted(indices, epoch, trainer.context())
        labels = data.train.labels[indices]
        l_clean = task_loss(predict(p, trainer.data.clean(indices, trainer.dtype), train=True), labels)
        l_adv = task_loss(predict(p, adversarial, train=True, update_stats=False), labels)
        return adversarial_objective(l_clean, l_adv, weights.mu)

    return trainer.fit(step_loss)


def train(cfg: TrainConfig, data: TrainingData, baseline: Checkpoint, out_dir: Optional[Path] = None) -> RunRecord:
    """Dispatch a stabilized run to its trainer."""
    if cfg.method in ("stability", "stability_sym"):
        return train_stability(cfg, data, baseline, out_dir)
    if cfg.method == "augment":
        return train_augment(cfg, data, baseline, out_dir)
    if cfg.method == "adversarial":
        return train_adversarial(cfg, data, baseline, out_dir)
    return train_baseline(cfg, data, out_dir=out_dir, init=baseline.model)
