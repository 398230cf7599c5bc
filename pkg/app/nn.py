"""Layers and the desk-scale residual classifier (MiniResNet)."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.errors import ConfigError, ShapeError
from app.tensor import Tensor, no_grad
from app.tensor import ops

# Configure logging
logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ModelConfig(BaseModel):
    """Architecture of a MiniResNet."""

    model_config = ConfigDict(extra="forbid")

    input_shape: Tuple[int, int, int] = (32, 32, 3)
    num_classes: int = Field(10, ge=2)
    stem_channels: int = Field(16, ge=1)
    stage_blocks: List[int] = Field(default_factory=lambda: [2, 2, 2], min_length=1)
    norm: bool = True
    dtype: str = "float32"

    @field_validator("input_shape")
    @classmethod
    def _positive_extents(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(extent < 1 for extent in value):
            raise ValueError(f"input extents must be positive, got {value}")
        return value

    @field_validator("stage_blocks")
    @classmethod
    def _positive_blocks(cls, value: List[int]) -> List[int]:
        if any(count < 1 for count in value):
            raise ValueError(f"every stage needs at least one block, got {value}")
        return value

    @field_validator("dtype")
    @classmethod
    def _float_dtype(cls, value: str) -> str:
        if value not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {value!r}")
        return value

    def stage_channels(self) -> List[int]:
        return [self.stem_channels * 2 ** s for s in range(len(self.stage_blocks))]


@dataclass
class ModelParams:
    """Named map layer-path -> Tensor, including batch-norm running statistics."""

    config: ModelConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def trainable(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.tensors.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            tensors={name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in self.tensors.items()},
        )


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype: str) -> Tensor:
    weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(weight, requires_grad=True)


def _add_conv(tensors: Dict[str, Tensor], rng, name: str, kernel: int, c_in: int, c_out: int, cfg: ModelConfig) -> None:
    tensors[f"{name}.weight"] = _he_normal(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in, cfg.dtype)
    if not cfg.norm:
        tensors[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=cfg.dtype), requires_grad=True)


def _add_norm(tensors: Dict[str, Tensor], name: str, channels: int, cfg: ModelConfig) -> None:
    if not cfg.norm:
        return
    tensors[f"{name}.gamma"] = Tensor(np.ones(channels, dtype=cfg.dtype), requires_grad=True)
    tensors[f"{name}.beta"] = Tensor(np.zeros(channels, dtype=cfg.dtype), requires_grad=True)
    tensors[f"{name}.running_mean"] = Tensor(np.zeros(channels, dtype=cfg.dtype))
    tensors[f"{name}.running_var"] = Tensor(np.ones(channels, dtype=cfg.dtype))


def _check_spatial(cfg: ModelConfig) -> None:
    height, width = cfg.input_shape[:2]
    for stage in range(1, len(cfg.stage_blocks)):
        if height < 2 or width < 2:
            raise ConfigError(
                f"stage {stage + 1} would reduce a {height}x{width} feature map below 1x1; "
                f"use fewer stages or a larger input than {cfg.input_shape}"
            )
        height, width = (height + 1) // 2, (width + 1) // 2


def build_model(cfg: ModelConfig, seed: int) -> ModelParams:
    """
    Initialize a MiniResNet deterministically from a seed.

    Conv and dense weights are He-normal (variance 2 / fan_in), biases zero,
    norm scales one and shifts zero.

    Args:
        cfg: Architecture
        seed: Initialization seed

    Returns:
        Freshly initialized parameters
    """
    _check_spatial(cfg)
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    in_channels = cfg.input_shape[2]

    _add_conv(tensors, rng, "stem.conv", 3, in_channels, cfg.stem_channels, cfg)
    _add_norm(tensors, "stem.bn", cfg.stem_channels, cfg)
    in_channels = cfg.stem_channels

    for s, (blocks, channels) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels()), start=1):
        for b in range(blocks):
            prefix = f"stage{s}.block{b}"
            stride = 2 if s > 1 and b == 0 else 1
            _add_conv(tensors, rng, f"{prefix}.conv1", 3, in_channels, channels, cfg)
            _add_norm(tensors, f"{prefix}.bn1", channels, cfg)
            _add_conv(tensors, rng, f"{prefix}.conv2", 3, channels, channels, cfg)
            _add_norm(tensors, f"{prefix}.bn2", channels, cfg)
            if stride != 1 or in_channels != channels:
                _add_conv(tensors, rng, f"{prefix}.shortcut.conv", 1, in_channels, channels, cfg)
                _add_norm(tensors, f"{prefix}.shortcut.bn", channels, cfg)
            in_channels = channels

    tensors["head.weight"] = _he_normal(rng, (in_channels, cfg.num_classes), in_channels, cfg.dtype)
    tensors["head.bias"] = Tensor(np.zeros(cfg.num_classes, dtype=cfg.dtype), requires_grad=True)

    count = sum(t.data.size for t in tensors.values() if t.requires_grad)
    logger.info(f"Built MiniResNet with {count} trainable parameters (seed {seed})")
    return ModelParams(config=cfg, tensors=tensors)


class _Forward:
    """One forward pass; collects running-statistic updates for train mode."""

    def __init__(self, params: ModelParams, train: bool):
        self.params = params
        self.train = train
        self.updates: Dict[str, np.ndarray] = {}

    def conv_norm(self, name: str, x: Tensor, stride: int, kernel_name: str = "conv", norm_name: str = "bn") -> Tensor:
        p = self.params.tensors
        out = ops.conv2d(x, p[f"{name}{kernel_name}.weight"], stride=stride, padding="same")
        if not self.params.config.norm:
            return out + p[f"{name}{kernel_name}.bias"]
        prefix = f"{name}{norm_name}"
        out, mean, var = ops.batch_norm(
            out,
            p[f"{prefix}.gamma"],
            p[f"{prefix}.beta"],
            p[f"{prefix}.running_mean"].data,
            p[f"{prefix}.running_var"].data,
            train=self.train,
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )
        if self.train:
            self.updates[f"{prefix}.running_mean"] = mean
            self.updates[f"{prefix}.running_var"] = var
        return out


def residual_block(
    params: ModelParams,
    prefix: str,
    x: Tensor,
    stride: int = 1,
    train: bool = False,
    forward: Optional[_Forward] = None,
) -> Tensor:
    """
    relu(branch(x) + skip(x)) for one block.

    The branch is conv-norm-relu-conv-norm; the skip is the identity, or a
    1x1 conv-norm when the stride or width changes. Running-statistic
    updates are collected on `forward` and never written to `params` here.
    """
    forward = forward or _Forward(params, train)
    branch = ops.relu(forward.conv_norm(f"{prefix}.", x, stride, "conv1", "bn1"))
    branch = forward.conv_norm(f"{prefix}.", branch, 1, "conv2", "bn2")
    if f"{prefix}.shortcut.conv.weight" in params.tensors:
        skip = forward.conv_norm(f"{prefix}.shortcut.", x, stride)
    else:
        skip = x
    return ops.relu(branch + skip)


def predict(
    params: ModelParams,
    batch: Union[Tensor, np.ndarray],
    train: bool = False,
    update_stats: bool = True,
) -> Tensor:
    """
    Forward pass to logits.

    Args:
        params: Model parameters
        batch: Normalized images, shape (N, H, W, C) matching the config
        train: Batch-norm mode (batch statistics when True)
        update_stats: In train mode, write the new running statistics back

    Returns:
        Logits of shape (N, num_classes)
    """
    cfg = params.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=cfg.dtype))
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(cfg.input_shape):
        raise ShapeError(f"predict: batch shape {x.shape} does not match model input {tuple(cfg.input_shape)}")

    forward = _Forward(params, train)
    out = ops.relu(forward.conv_norm("stem.", x, 1))
    for s, blocks in enumerate(cfg.stage_blocks, start=1):
        for b in range(blocks):
            stride = 2 if s > 1 and b == 0 else 1
            out = residual_block(params, f"stage{s}.block{b}", out, stride, train, forward)
    pooled = ops.mean(out, axis=(1, 2))
    logits = pooled @ params.tensors["head.weight"] + params.tensors["head.bias"]

    if train and update_stats:
        for name, value in forward.updates.items():
            params.tensors[name] = Tensor(value)
    return logits


def predict_proba(params: ModelParams, batch: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Eval-mode class probabilities; rows sum to one."""
    with no_grad():
        logits = predict(params, batch, train=False)
    return ops.softmax_array(logits.data.astype(np.float64))


def predict_labels(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode top-1 predictions, batched."""
    predictions: List[np.ndarray] = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = predict(params, images[start:start + batch_size], train=False)
            predictions.append(logits.data.argmax(axis=1))
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)


def accuracy(params: ModelParams, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode."""
    if len(labels) == 0:
        return 0.0
    return float((predict_labels(params, images, batch_size) == labels).mean())
