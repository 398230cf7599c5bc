"""
Datasets, the preprocessing pipeline and dataset statistics.

Pipeline order per sample: resize the shortest side, centre (or offset)
crop, scale to [0, 1], distort, normalize by the training-split channel
statistics.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.distortions import (
    DistortionSpec,
    ModelContext,
    apply,
    apply_batch,
    offset_crop,
    resize_bilinear,
    split_crop,
)
from app.errors import ConfigError, DataError
from app.rng import SPLIT, SYNTHETIC, RngStream

# Configure logging
logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# IDX type byte -> big-endian dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

SHAPE_NAMES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "plus",
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "checkerboard",
    "cross",
)


@dataclass
class Dataset:
    """Raw images (N, H, W, C) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"dataset images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and self.labels.min() < 0:
            raise DataError(f"negative label {self.labels.min()} in {self.split} split")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}, expected one of {SPLITS}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def subset(self, indices: np.ndarray, split: str) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], split)


def check_labels(dataset: Dataset, num_classes: int) -> None:
    """Reject datasets whose label range disagrees with the model."""
    if dataset.labels.size and dataset.labels.max() >= num_classes:
        raise DataError(
            f"{dataset.split} split has label {dataset.labels.max()} but the model has {num_classes} classes"
        )


# IDX files

def read_idx(path: Path) -> np.ndarray:
    """
    Parse an IDX file (big-endian header, zero magic prefix, type byte, rank).

    Args:
        path: File to read

    Returns:
        Array with the stored shape, converted to native byte order
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at byte {len(raw)}, need 4 magic bytes")
    if raw[0] != 0 or raw[1] != 0:
        raise DataError(f"{path}: bad magic at byte 0: {raw[:4].hex()}")
    type_code, rank = raw[2], raw[3]
    if type_code not in IDX_TYPES:
        raise DataError(f"{path}: unknown element type 0x{type_code:02x} at byte 2")
    if rank < 1:
        raise DataError(f"{path}: rank 0 at byte 3")
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise DataError(f"{path}: truncated dimensions, header needs {header_end} bytes, file has {len(raw)}")
    shape = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=rank, offset=4))
    dtype = IDX_TYPES[type_code]
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(raw) - header_end
    if actual != expected:
        raise DataError(
            f"{path}: payload at byte {header_end} should hold {expected} bytes for shape {shape}, found {actual}"
        )
    data = np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(shape)
    return data.astype(dtype.newbyteorder("="))


def write_idx(array: np.ndarray, path: Path) -> None:
    codes = {dtype.newbyteorder("="): code for code, dtype in IDX_TYPES.items()}
    native = array.dtype.newbyteorder("=")
    if native not in codes:
        raise DataError(f"cannot store dtype {array.dtype} in an IDX file")
    header = bytes([0, 0, codes[native], array.ndim]) + np.asarray(array.shape, dtype=">u4").tobytes()
    Path(path).write_bytes(header + array.astype(native.newbyteorder(">")).tobytes())


def load_idx(images_path: Path, labels_path: Path, split: str = "train") -> Dataset:
    """Load an image IDX file (rank 3 or 4) with its rank-1 label file."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise DataError(f"{images_path}: expected rank 3 or 4 images, got rank {images.ndim}")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: expected rank 1 labels, got rank {labels.ndim}")
    if len(images) != len(labels):
        raise DataError(f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    logger.info(f"Loaded {len(labels)} samples of shape {images.shape[1:]} from {images_path}")
    return Dataset(images, labels, split)


# Synthetic shapes

class SyntheticSpec(BaseModel):
    """Class-structured shape images, one shape family per class."""

    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(10, ge=2, le=len(SHAPE_NAMES))
    side: int = Field(32, ge=8)
    channels: Literal[1, 3] = 3
    noise: float = Field(0.03, ge=0.0)


def _shape_mask(kind: int, yy: np.ndarray, xx: np.ndarray, rng: RngStream) -> np.ndarray:
    cy, cx = rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15)
    radius = rng.uniform(0.45, 0.7)
    freq = rng.uniform(2.5, 4.0) * np.pi
    phase = rng.uniform(0.0, 2 * np.pi)
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dx, dy)
    inside = np.maximum(np.abs(dx), np.abs(dy)) < radius
    bar = 0.25 * radius
    name = SHAPE_NAMES[kind]
    if name == "disk":
        return dist < radius
    if name == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) < 0.8 * radius
    if name == "triangle":
        return (dy < radius) & (np.abs(dx) < (dy + radius) * 0.5)
    if name == "ring":
        return (dist < radius) & (dist > 0.55 * radius)
    if name == "plus":
        return inside & ((np.abs(dx) < bar) | (np.abs(dy) < bar))
    if name == "horizontal_stripes":
        return np.sin(yy * freq + phase) > 0
    if name == "vertical_stripes":
        return np.sin(xx * freq + phase) > 0
    if name == "diagonal_stripes":
        return np.sin((xx + yy) * freq / np.sqrt(2) + phase) > 0
    if name == "checkerboard":
        return np.sin(xx * freq + phase) * np.sin(yy * freq + phase) > 0
    return inside & ((np.abs(dx - dy) < bar) | (np.abs(dx + dy) < bar))


def _render(kind: int, spec: SyntheticSpec, rng: RngStream) -> np.ndarray:
    coords = (np.arange(spec.side) + 0.5) / spec.side * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    mask = _shape_mask(kind, yy, xx, rng)[..., None]
    foreground = rng.generator.uniform(0.55, 1.0, size=spec.channels)
    background = rng.generator.uniform(0.0, 0.45, size=spec.channels)
    img = background + mask * (foreground - background)
    img = img + rng.normal(spec.noise, img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def load_synthetic(spec: SyntheticSpec, seed: int, per_class: int, split: str = "train") -> Dataset:
    """
    Generate `per_class` uint8 images per class, deterministically from seed.

    Splits draw from disjoint streams, so a test set never repeats training images.
    """
    root = RngStream(seed).child(SYNTHETIC, SPLITS.index(split))
    images, labels = [], []
    for label in range(spec.num_classes):
        for i in range(per_class):
            images.append(_render(label, spec, root.child(label, i)))
            labels.append(label)
    shape = (0, spec.side, spec.side, spec.channels)
    stacked = np.stack(images) if images else np.zeros(shape, dtype=np.uint8)
    logger.info(f"Generated {len(labels)} synthetic {split} images ({spec.num_classes} classes, seed {seed})")
    return Dataset(stacked, np.asarray(labels, dtype=np.int64), split)


def split_per_class(dataset: Dataset, train_n: int, val_n: int, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Draw exactly train_n / val_n samples of every class, disjointly.

    Returns:
        (train, val) datasets
    """
    root = RngStream(seed).child(SPLIT)
    train_idx: List[np.ndarray] = []
    val_idx: List[np.ndarray] = []
    for label in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == label)
        if len(members) < train_n + val_n:
            raise DataError(
                f"class {label} has {len(members)} samples, needs {train_n + val_n} ({train_n} train + {val_n} val)"
            )
        order = members[root.child(label).permutation(len(members))]
        train_idx.append(order[:train_n])
        val_idx.append(order[train_n:train_n + val_n])
    train = np.sort(np.concatenate(train_idx)) if train_idx else np.zeros(0, dtype=np.int64)
    val = np.sort(np.concatenate(val_idx)) if val_idx else np.zeros(0, dtype=np.int64)
    return dataset.subset(train, "train"), dataset.subset(val, "val")


class DataConfig(BaseModel):
    """Where the data comes from and how it is split."""

    model_config = ConfigDict(extra="forbid")

    source: Literal["synthetic", "idx"] = "synthetic"
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    train_images: Optional[Path] = None
    train_labels: Optional[Path] = None
    test_images: Optional[Path] = None
    test_labels: Optional[Path] = None
    train_per_class: int = Field(90, ge=1)
    val_per_class: int = Field(10, ge=1)
    test_per_class: int = Field(20, ge=1)

    @model_validator(mode="after")
    def _paths_for_idx(self) -> "DataConfig":
        if self.source == "idx":
            missing = [
                name for name in ("train_images", "train_labels", "test_images", "test_labels")
                if getattr(self, name) is None
            ]
            if missing:
                raise ValueError(f"idx source needs dataset paths: missing {', '.join(missing)}")
        return self


@dataclass
class DataSplits:
    train: Dataset
    val: Dataset
    test: Dataset


def load_splits(cfg: DataConfig, seed: int) -> DataSplits:
    """Load or generate the data and split it into train / val / test."""
    if cfg.source == "synthetic":
        pool = load_synthetic(cfg.synthetic, seed, cfg.train_per_class + cfg.val_per_class, "train")
        test = load_synthetic(cfg.synthetic, seed, cfg.test_per_class, "test")
    else:
        for path in (cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels):
            if not Path(path).is_file():
                raise ConfigError(f"dataset path does not exist: {path}")
        pool = load_idx(cfg.train_images, cfg.train_labels, "train")
        test = load_idx(cfg.test_images, cfg.test_labels, "test")
    train, val = split_per_class(pool, cfg.train_per_class, cfg.val_per_class, seed)
    return DataSplits(train=train, val=val, test=test)


# Pipeline

class PipelineConfig(BaseModel):
    """Resize/crop geometry; defaults are the desk-scale 36 -> 32 pipeline."""

    model_config = ConfigDict(extra="forbid")

    resize_side: int = Field(36, ge=1)
    crop_side: int = Field(32, ge=1)
    thumbnail_mode: Literal["crop", "downsample"] = "crop"

    @model_validator(mode="after")
    def _crop_fits(self) -> "PipelineConfig":
        if self.crop_side > self.resize_side:
            raise ValueError(f"crop side {self.crop_side} is larger than the resized side {self.resize_side}")
        return self

    @property
    def margin(self) -> int:
        return (self.resize_side - self.crop_side) // 2


@dataclass
class ChannelStats:
    """Per-channel mean and standard deviation of [0, 1] training images."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise DataError(f"channel stats disagree: mean {self.mean.shape}, std {self.std.shape}")
        if np.any(self.std <= 0):
            raise DataError(f"channel std must be positive, got {self.std.tolist()}")

    @classmethod
    def identity(cls, channels: int) -> "ChannelStats":
        return cls(np.zeros(channels), np.ones(channels))


def compute_stats(images: np.ndarray) -> ChannelStats:
    """Channel statistics of undistorted, [0, 1]-scaled (N, H, W, C) images."""
    if len(images) == 0:
        raise DataError("cannot compute channel statistics of an empty split")
    values = images.astype(np.float64)
    std = values.std(axis=(0, 1, 2))
    if np.any(std == 0):
        raise DataError(f"constant channel in training images (std {std.tolist()})")
    return ChannelStats(values.mean(axis=(0, 1, 2)), std)


def _unit_scale(images: np.ndarray) -> float:
    return 255.0 if images.dtype == np.uint8 else 1.0


def resize_shortest(img: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize so the shorter side equals `side`, keeping aspect ratio."""
    height, width = img.shape[:2]
    short = min(height, width)
    out_h, out_w = max(1, round(height * side / short)), max(1, round(width * side / short))
    if (out_h, out_w) == (height, width):
        return img.astype(np.float64)
    return resize_bilinear(img.astype(np.float64), out_h, out_w)


def center_crop(img: np.ndarray, side: int) -> np.ndarray:
    height, width = img.shape[:2]
    if side > height or side > width:
        raise ConfigError(f"crop side {side} is larger than the resized image {height}x{width}")
    top, left = (height - side) // 2, (width - side) // 2
    return img[top:top + side, left:left + side]


def normalize(images: np.ndarray, stats: ChannelStats, dtype: str = "float32") -> np.ndarray:
    return ((images - stats.mean) / stats.std).astype(dtype)


def preprocess(
    img_raw: np.ndarray,
    cfg: PipelineConfig,
    stats: ChannelStats,
    distortion: Optional[DistortionSpec] = None,
    rng: Optional[RngStream] = None,
    ctx: Optional[ModelContext] = None,
    label: Optional[int] = None,
    dtype: str = "float32",
) -> np.ndarray:
    """
    Run one raw image through the pipeline.

    Args:
        img_raw: (H, W, C) uint8 or [0, 1] float image
        cfg: Pipeline geometry
        stats: Normalization statistics
        distortion: Optional distortion; a crop component replaces the centre crop
        rng: Per-sample stream, required when the distortion is random
        ctx: Model context for fgsm
        label: Reference label for fgsm
        dtype: Output dtype

    Returns:
        Normalized (crop, crop, C) image
    """
    resized = resize_shortest(img_raw, cfg.resize_side)
    offset, rest = split_crop(distortion)
    if offset:
        cropped = offset_crop(resized, offset, cfg.crop_side, rng)
    else:
        cropped = center_crop(resized, cfg.crop_side)
    img = cropped / _unit_scale(img_raw)
    if rest is not None:
        img = apply(rest, img, rng, ctx, label, fill=stats.mean, thumbnail_mode=cfg.thumbnail_mode)
    return normalize(img, stats, dtype)


class PreparedSplit:
    """
    A split with pipeline steps (1) and (3) done once.

    Holds the resized [0, 1] images so batches only pay for cropping,
    distortion and normalization.
    """

    def __init__(self, dataset: Dataset, cfg: PipelineConfig):
        scale = _unit_scale(dataset.images)
        self.cfg = cfg
        self.split = dataset.split
        self.labels = dataset.labels
        self.resized = np.stack([resize_shortest(img, cfg.resize_side) / scale for img in dataset.images]) \
            if len(dataset) else np.zeros((0, cfg.resize_side, cfg.resize_side, dataset.images.shape[3]))
        self._centered = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def centered(self) -> np.ndarray:
        """Undistorted, centre-cropped [0, 1] images."""
        if self._centered is None:
            height, width = self.resized.shape[1:3]
            side = self.cfg.crop_side
            if side > height or side > width:
                raise ConfigError(f"crop side {side} is larger than the resized image {height}x{width}")
            top, left = (height - side) // 2, (width - side) // 2
            self._centered = self.resized[:, top:top + side, left:left + side]
        return self._centered

    def batch(
        self,
        indices: np.ndarray,
        distortion: Optional[DistortionSpec] = None,
        rngs: Optional[Sequence[RngStream]] = None,
        ctx: Optional[ModelContext] = None,
        fill=0.0,
    ) -> np.ndarray:
        """[0, 1] images of the selected samples after cropping and distortion."""
        offset, rest = split_crop(distortion)
        if offset:
            images = np.stack([
                offset_crop(self.resized[i], offset, self.cfg.crop_side, rng)
                for i, rng in zip(indices, rngs)
            ])
        else:
            images = self.centered[indices]
        if rest is None:
            return images
        return apply_batch(
            rest, images, rngs, ctx, self.labels[indices], fill=fill, thumbnail_mode=self.cfg.thumbnail_mode
        )
