"""
Distortion generators, their composition, and the reference levels.

Images are (H, W, C) float arrays with values in [0, 1]. Randomized
generators draw from the RngStream they are given, in a fixed order, so the
same stream reproduces the same output.
"""

import logging
import math
from typing import Dict, List, Literal, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app import jpeg
from app.errors import DistortionError, NumericError
from app.nn import ModelParams, predict
from app.objectives import task_loss
from app.rng import RngStream
from app.tensor import Tensor, input_gradient
from app.tensor.ops import bilinear_sample_array

# Configure logging
logger = logging.getLogger(__name__)

Image = np.ndarray
Kind = Literal["gaussian", "jpeg", "thumbnail", "fgsm", "rotation", "crop", "compose"]

KINDS: Tuple[str, ...] = ("gaussian", "jpeg", "thumbnail", "fgsm", "rotation", "crop")
CATEGORIES: Dict[str, str] = {
    "gaussian": "noise",
    "jpeg": "noise",
    "thumbnail": "noise",
    "fgsm": "noise",
    "rotation": "transformative",
    "crop": "transformative",
}

# reference levels at the 256 -> 224 pipeline
REFERENCE_CROP = 224
REFERENCE_RESIZE = 256
PRACTICAL_LEVELS: Dict[str, float] = {
    "gaussian": 0.05,
    "jpeg": 30,
    "thumbnail": 150,
    "fgsm": 0.001,
    "rotation": 30,
    "crop": 3,
}
# (start, end, points, scale)
TRAINING_RANGES: Dict[str, Tuple[float, float, int, str]] = {
    "gaussian": (0.01, 1.0, 4, "log"),
    "jpeg": (90, 10, 3, "linear"),
    "thumbnail": (20, 200, 3, "linear"),
    "fgsm": (0.001, 1.0, 7, "log"),
    "rotation": (0, 180, 3, "linear"),
    "crop": (0, 15, 3, "linear"),
}
INTEGER_KINDS = ("jpeg", "thumbnail", "crop")


def _rescale(kind: str, value: float, crop_side: int, resize_side: int, at_least_one: bool = False) -> float:
    """Map a pixel-valued level from the 256/224 pipeline onto another one."""
    if kind == "thumbnail":
        scaled = round(value * crop_side / REFERENCE_CROP)
        return float(min(max(scaled, 1), crop_side))
    if kind == "crop":
        margin = (resize_side - crop_side) // 2
        scaled = round(value * margin / ((REFERENCE_RESIZE - REFERENCE_CROP) // 2))
        if at_least_one and value > 0 and margin > 0:
            scaled = max(scaled, 1)
        return float(min(scaled, margin))
    return float(value)


def practical_level(kind: str, crop_side: int = REFERENCE_CROP, resize_side: int = REFERENCE_RESIZE) -> float:
    """Practical level of a distortion, rescaled for pixel-valued parameters."""
    return _rescale(kind, PRACTICAL_LEVELS[kind], crop_side, resize_side, at_least_one=True)


def training_range(kind: str, crop_side: int = REFERENCE_CROP, resize_side: int = REFERENCE_RESIZE) -> Tuple[float, float, int, str]:
    start, end, points, scale = TRAINING_RANGES[kind]
    return (
        _rescale(kind, start, crop_side, resize_side),
        _rescale(kind, end, crop_side, resize_side),
        points,
        scale,
    )


def identity_level(kind: str, crop_side: int) -> float:
    """Parameter value that stands for the undistorted image."""
    if kind == "jpeg":
        return 100.0
    if kind == "thumbnail":
        return float(crop_side)
    return 0.0


class DistortionSpec(BaseModel):
    """A distortion kind with its scalar parameter, or a composition of specs."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Kind
    parameter: float = 0.0
    children: Tuple["DistortionSpec", ...] = ()

    @model_validator(mode="after")
    def _check_parameter(self) -> "DistortionSpec":
        kind, value = self.kind, self.parameter
        if kind != "compose" and self.children:
            raise ValueError(f"{kind}: only compose specs take children")
        if kind in INTEGER_KINDS and value != int(value):
            raise ValueError(f"{kind}: parameter must be an integer, got {value}")
        if kind in ("gaussian", "fgsm", "crop") and value < 0:
            raise ValueError(f"{kind}: parameter must be >= 0, got {value}")
        if kind == "jpeg" and not 1 <= value <= 100:
            raise ValueError(f"jpeg: quality must lie in [1, 100], got {value}")
        if kind == "thumbnail" and value < 1:
            raise ValueError(f"thumbnail: side length must be >= 1, got {value}")
        if kind == "rotation" and not 0 <= value <= 180:
            raise ValueError(f"rotation: maximum angle must lie in [0, 180], got {value}")
        return self

    @property
    def category(self) -> str:
        if self.kind == "compose":
            categories = {child.category for child in self.children}
            return categories.pop() if len(categories) == 1 else "mixed"
        return CATEGORIES[self.kind]

    def label(self) -> str:
        if self.kind == "compose":
            return "+".join(child.label() for child in self.children)
        return f"{self.kind}:{self.parameter:g}"

    def kinds(self) -> List[str]:
        if self.kind == "compose":
            return [k for child in self.children for k in child.kinds()]
        return [self.kind]

    @classmethod
    def parse(cls, text: str) -> "DistortionSpec":
        """Parse `kind:value` or `kind:value+kind:value` (a composition)."""
        parts = [p.strip() for p in text.split("+") if p.strip()]
        specs = []
        for part in parts:
            kind, _, value = part.partition(":")
            try:
                specs.append(cls(kind=kind.strip(), parameter=float(value) if value else 0.0))
            except ValueError as e:
                raise DistortionError(f"invalid distortion {part!r}: {e}") from e
        if len(specs) == 1:
            return specs[0]
        return cls(kind="compose", children=tuple(specs))


DistortionSpec.model_rebuild()


def compose(*specs: DistortionSpec) -> DistortionSpec:
    return DistortionSpec(kind="compose", children=tuple(specs))


class ModelContext(Protocol):
    """Anything that evaluates a differentiable loss on [0, 1] images."""

    def loss(self, images: Tensor, labels: np.ndarray) -> Tensor: ...


class ClassifierContext:
    """
    Loss of a classifier on [0, 1] images, normalization included.

    The loss is the batch sum of per-sample cross-entropies so each sample's
    input gradient equals its single-image gradient. Batch norm runs in eval
    mode and parameters are never updated.
    """

    def __init__(self, params: ModelParams, mean: np.ndarray, std: np.ndarray):
        dtype = params.config.dtype
        self.dtype = dtype
        self.params = params
        self.shift = Tensor(-np.asarray(mean, dtype=dtype))
        self.scale = Tensor(1.0 / np.asarray(std, dtype=dtype))

    def loss(self, images: Tensor, labels: np.ndarray) -> Tensor:
        normalized = (images + self.shift) * self.scale
        logits = predict(self.params, normalized, train=False)
        return task_loss(logits, labels) * float(len(labels))


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise DistortionError(message)


def gaussian_noise(img: Image, sigma: float, rng: RngStream) -> Image:
    """Add i.i.d. N(0, sigma^2) noise per pixel and clip to [0, 1]."""
    _require(sigma >= 0, f"gaussian_noise: sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    noisy = img + rng.normal(sigma, img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(img.dtype)


def jpeg_compress(img: Image, quality: int) -> Image:
    """JPEG-style encode/decode round trip at a quality level in [1, 100]."""
    _require(quality == int(quality) and 1 <= quality <= 100, f"jpeg_compress: quality must be an integer in [1, 100], got {quality}")
    _require(img.shape[2] in (1, 3), f"jpeg_compress: expected 1 or 3 channels, got {img.shape[2]}")
    return jpeg.roundtrip(img, int(quality))


def resize_bilinear(img: Image, height: int, width: int) -> Image:
    """Bilinear resize with half-pixel centres and edge clamping."""
    in_h, in_w = img.shape[:2]
    rows = (np.arange(height) + 0.5) * (in_h / height) - 0.5
    cols = (np.arange(width) + 0.5) * (in_w / width) - 0.5
    rows = np.clip(rows, 0, in_h - 1)
    cols = np.clip(cols, 0, in_w - 1)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    return bilinear_sample_array(img, grid_r, grid_c)


def thumbnail_resize(img: Image, side: int, mode: str = "crop") -> Image:
    """
    Thumbnail artifacts at side length A.

    mode "crop" extracts the centre A x A region and resizes it back to the
    original size; mode "downsample" resizes the whole image to A x A and back.
    """
    height, width = img.shape[:2]
    _require(side == int(side) and 1 <= side <= min(height, width), f"thumbnail_resize: A must be an integer in [1, {min(height, width)}], got {side}")
    side = int(side)
    if mode == "downsample":
        small = resize_bilinear(img, side, side)
    elif mode == "crop":
        top, left = (height - side) // 2, (width - side) // 2
        small = img[top:top + side, left:left + side]
    else:
        raise DistortionError(f"thumbnail_resize: unknown mode {mode!r}")
    return np.clip(resize_bilinear(small, height, width), 0.0, 1.0)


def fgsm(img: Image, label, ctx: ModelContext, epsilon: float) -> Image:
    """
    Fast gradient sign step x' = clip(x + eps * sign(grad_x L), 0, 1).

    Accepts a single (H, W, C) image with an integer label, or an
    (N, H, W, C) batch with N labels. The context's parameters are not
    modified and no tape survives the call.
    """
    _require(epsilon >= 0, f"fgsm: epsilon must be >= 0, got {epsilon}")
    single = img.ndim == 3
    batch = img[None] if single else img
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if epsilon == 0:
        return img.copy()
    x = Tensor(batch.astype(getattr(ctx, "dtype", batch.dtype)), requires_grad=True)
    grad = input_gradient(lambda t: ctx.loss(t, labels), x).data
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"fgsm: non-finite input gradient ({np.count_nonzero(~np.isfinite(grad))} entries)")
    adversarial = np.clip(batch + epsilon * np.sign(grad), 0.0, 1.0).astype(img.dtype)
    return adversarial[0] if single else adversarial


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) < 1e-9, nearest, coords)


def rotate_by(img: Image, angle: float, fill=0.0) -> Image:
    """
    Rotate counter-clockwise by `angle` degrees about the image centre.

    Bilinear resampling; source points outside the image take `fill`
    (scalar or per-channel). Multiples of 90 degrees on square images are
    exact pixel permutations.
    """
    height, width = img.shape[:2]
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    theta = math.radians(angle)
    cos, sin = math.cos(theta), math.sin(theta)
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    dy, dx = rows - cy, cols - cx
    src_cols = _snap(cx + cos * dx - sin * dy)
    src_rows = _snap(cy + sin * dx + cos * dy)
    return bilinear_sample_array(img, src_rows, src_cols, fill)


def rotate(img: Image, rho_max: float, rng: RngStream, fill=0.0) -> Image:
    """Rotate by an angle drawn uniformly from [-rho_max, rho_max] degrees."""
    _require(0 <= rho_max <= 180, f"rotate: rho_max must lie in [0, 180], got {rho_max}")
    angle = rng.uniform(-rho_max, rho_max)
    return np.clip(rotate_by(img, angle, fill), 0.0, 1.0)


def offset_crop(full_img: Image, offset: int, crop_side: int, rng: RngStream) -> Image:
    """
    Square crop whose centre is displaced from the image centre.

    The displacement (dx, dy) is drawn uniformly from the integers in
    [-offset, offset]; the crop must stay inside the image at the maximal
    displacement.
    """
    height, width = full_img.shape[:2]
    top, left = (height - crop_side) // 2, (width - crop_side) // 2
    _require(offset == int(offset) and offset >= 0, f"offset_crop: offset must be a non-negative integer, got {offset}")
    _require(
        top - offset >= 0 and top + offset + crop_side <= height and left - offset >= 0 and left + offset + crop_side <= width,
        f"offset_crop: offset {offset} moves a {crop_side}px crop outside a {height}x{width} image",
    )
    dy = rng.integers(-int(offset), int(offset))
    dx = rng.integers(-int(offset), int(offset))
    return full_img[top + dy:top + dy + crop_side, left + dx:left + dx + crop_side].copy()


def apply(
    spec: DistortionSpec,
    img: Image,
    rng: RngStream,
    ctx: Optional[ModelContext] = None,
    label: Optional[int] = None,
    *,
    fill=0.0,
    crop_side: Optional[int] = None,
    thumbnail_mode: str = "crop",
) -> Image:
    """
    Dispatch a spec to its generator; compositions apply children in order.

    Args:
        spec: Distortion to apply
        img: Image at the pipeline's distortion point
        rng: Per-sample stream
        ctx: Model context, required by fgsm
        label: Reference label, required by fgsm
        fill: Rotation fill value (per-channel dataset mean)
        crop_side: Output side of offset crops (img is then the resized source)
        thumbnail_mode: "crop" or "downsample"

    Returns:
        Distorted image
    """
    kind, value = spec.kind, spec.parameter
    if kind == "compose":
        for child in spec.children:
            img = apply(child, img, rng, ctx, label, fill=fill, crop_side=crop_side, thumbnail_mode=thumbnail_mode)
        return img
    if kind == "gaussian":
        return gaussian_noise(img, value, rng)
    if kind == "jpeg":
        return jpeg_compress(img, int(value))
    if kind == "thumbnail":
        return thumbnail_resize(img, int(value), thumbnail_mode)
    if kind == "rotation":
        return rotate(img, value, rng, fill)
    if kind == "fgsm":
        _require(ctx is not None and label is not None, "fgsm: a model context and a label are required")
        return fgsm(img, label, ctx, value)
    if kind == "crop":
        _require(crop_side is not None, "crop: offset crops need the crop side of the pipeline")
        return offset_crop(img, int(value), crop_side, rng)
    raise DistortionError(f"unknown distortion kind {kind!r}")


def apply_batch(
    spec: DistortionSpec,
    images: np.ndarray,
    rngs: Sequence[RngStream],
    ctx: Optional[ModelContext] = None,
    labels: Optional[np.ndarray] = None,
    *,
    fill=0.0,
    thumbnail_mode: str = "crop",
) -> np.ndarray:
    """
    Apply a spec to an (N, H, W, C) batch, one stream per sample.

    FGSM steps run batched; every other generator runs per sample.
    """
    if spec.kind == "compose":
        for child in spec.children:
            images = apply_batch(child, images, rngs, ctx, labels, fill=fill, thumbnail_mode=thumbnail_mode)
        return images
    if spec.kind == "fgsm":
        _require(ctx is not None and labels is not None, "fgsm: a model context and labels are required")
        return fgsm(images, labels, ctx, spec.parameter)
    if len(images) == 0:
        return images
    return np.stack([
        apply(spec, img, rng, fill=fill, thumbnail_mode=thumbnail_mode)
        for img, rng in zip(images, rngs)
    ]).astype(images.dtype)


def split_crop(spec: Optional[DistortionSpec]) -> Tuple[int, Optional[DistortionSpec]]:
    """
    Separate offset cropping, which replaces the pipeline's centre crop,
    from the distortions applied after scaling.

    Returns:
        (crop offset C, remaining spec or None)
    """
    if spec is None:
        return 0, None
    if spec.kind == "crop":
        return int(spec.parameter), None
    if spec.kind != "compose":
        return 0, spec
    offsets = [int(child.parameter) for child in spec.children if child.kind == "crop"]
    rest = [child for child in spec.children if child.kind != "crop"]
    if len(offsets) > 1:
        raise DistortionError("compose: at most one crop distortion per pipeline")
    remaining = None if not rest else (rest[0] if len(rest) == 1 else compose(*rest))
    return (offsets[0] if offsets else 0), remaining
