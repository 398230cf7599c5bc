"""
Baseline-JPEG-style lossy round trip.

Colour conversion to YCbCr (JFIF), level shift, orthonormal 8x8 block DCT,
quantization with the quality-scaled ITU-T T.81 Annex K tables, and the
inverse path back to 8-bit RGB samples. Chroma is kept at full resolution
(4:4:4) and no entropy coding is performed: the round trip reproduces the
quantization artifacts, not the bitstream.
"""

import numpy as np
from scipy.fft import dctn, idctn

BLOCK = 8

LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMINANCE_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)

_RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCBCR_TO_RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
])


def quality_scale(quality: int) -> int:
    """Percentage scaling of the base tables for a quality level in [1, 100]."""
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def quantization_table(base: np.ndarray, quality: int) -> np.ndarray:
    scaled = np.floor((base * quality_scale(quality) + 50) / 100)
    return np.clip(scaled, 1, 255)


def _blocks(plane: np.ndarray) -> np.ndarray:
    """(H, W) -> (H/8, W/8, 8, 8); H and W must be multiples of 8."""
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * BLOCK, bw * BLOCK)


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    coefficients = dctn(_blocks(plane), axes=(-2, -1), norm="ortho")
    restored = np.rint(coefficients / table) * table
    return _unblocks(idctn(restored, axes=(-2, -1), norm="ortho"))


def roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """
    Encode-then-decode an (H, W, C) image with values in [0, 1].

    Args:
        img: Image with 1 (grey) or 3 (RGB) channels
        quality: Quality level in [1, 100]

    Returns:
        Decoded image in [0, 1] with img's shape and dtype
    """
    height, width, channels = img.shape
    samples = img.astype(np.float64) * 255.0
    # chroma planes come out centred on zero, so only luma needs the level shift
    planes = samples @ _RGB_TO_YCBCR.T if channels == 3 else samples.copy()
    planes[:, :, 0] -= 128.0

    pad_h, pad_w = -height % BLOCK, -width % BLOCK
    planes = np.pad(planes, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")

    luma = quantization_table(LUMINANCE_TABLE, quality)
    chroma = quantization_table(CHROMINANCE_TABLE, quality)
    decoded = np.stack(
        [_quantize_plane(planes[:, :, c], luma if c == 0 else chroma) for c in range(planes.shape[2])],
        axis=-1,
    )[:height, :width]
    decoded[:, :, 0] += 128.0

    rgb = decoded @ _YCBCR_TO_RGB.T if channels == 3 else decoded
    rgb = np.clip(np.rint(rgb), 0, 255) / 255.0
    return rgb.astype(img.dtype)


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB (inf for identical inputs)."""
    mse = float(np.mean((reference.astype(np.float64) - test.astype(np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
