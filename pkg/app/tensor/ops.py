"""
Differentiable primitives.

Images are laid out NHWC (batch, height, width, channels); convolution
kernels are (kh, kw, c_in, c_out). Each primitive checks its shape rule and
raises ShapeError naming itself and the offending shapes.
"""

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.errors import ShapeError
from app.tensor.core import Function, Tensor

Axis = Optional[Union[int, Tuple[int, ...]]]


def _broadcast_shape(name: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a} and {b}") from None


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: expected (n, k) @ (k, m), got {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, np.zeros_like(a))

    def backward(self, grad):
        return (np.where(self.mask, grad, np.zeros_like(grad)),)


class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        self.count = a.size // out.size
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape=()):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Pad(Function):
    name = "pad"

    def forward(self, a, pad_width=()):
        if len(pad_width) != a.ndim:
            raise ShapeError(f"pad: pad widths {tuple(pad_width)} do not match input shape {a.shape}")
        self.slices = tuple(slice(lo, lo + extent) for (lo, _), extent in zip(pad_width, a.shape))
        return np.pad(a, pad_width)

    def backward(self, grad):
        return (grad[self.slices],)


def _same_padding(name: str, kernel: Tuple[int, int]) -> int:
    kh, kw = kernel
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"{name}: same padding needs a square odd kernel, got {kernel}")
    return kh // 2


def _scatter_windows(target: np.ndarray, windows: np.ndarray, stride: int) -> None:
    """Add window-position gradients (N, Ho, Wo, kh, kw, C) back onto target."""
    _, ho, wo, kh, kw, _ = windows.shape
    for i in range(kh):
        for j in range(kw):
            target[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += windows[:, :, :, i, j, :]


class Conv2d(Function):
    name = "conv2d"

    def forward(self, x, w, stride=1, padding="same"):
        if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
        if stride < 1:
            raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
        if padding not in ("same", "valid"):
            raise ValueError(f"conv2d: unknown padding mode {padding!r}")
        kh, kw = w.shape[:2]
        pad = _same_padding(self.name, (kh, kw)) if padding == "same" else 0
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        if xp.shape[1] < kh or xp.shape[2] < kw:
            raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
        self.x_shape, self.w, self.xp, self.stride, self.pad = x.shape, w, xp, stride, pad
        cols = self._columns()
        n, ho, wo = cols.shape[:3]
        out = cols.reshape(n * ho * wo, -1) @ w.reshape(-1, w.shape[3])
        return out.reshape(n, ho, wo, w.shape[3])

    def _columns(self) -> np.ndarray:
        kh, kw = self.w.shape[:2]
        windows = sliding_window_view(self.xp, (kh, kw), axis=(1, 2))[:, ::self.stride, ::self.stride]
        # (N, Ho, Wo, C, kh, kw) -> (N, Ho, Wo, kh, kw, C) to match the kernel layout
        return windows.transpose(0, 1, 2, 4, 5, 3)

    def backward(self, grad):
        cols = self._columns()
        n, ho, wo, kh, kw, c = cols.shape
        grad2 = grad.reshape(-1, self.w.shape[3])
        dw = (cols.reshape(n * ho * wo, -1).T @ grad2).reshape(self.w.shape)
        dcols = (grad2 @ self.w.reshape(-1, self.w.shape[3]).T).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros_like(self.xp)
        _scatter_windows(dxp, dcols, self.stride)
        h, w = self.x_shape[1:3]
        dx = dxp[:, self.pad:self.pad + h, self.pad:self.pad + w, :]
        return dx, dw


class _Pool2d(Function):
    def _windows(self, x, kernel, stride):
        if x.ndim != 4 or x.shape[1] < kernel or x.shape[2] < kernel:
            raise ShapeError(f"{self.name}: input {x.shape} too small for kernel {kernel}")
        self.x_shape, self.kernel, self.stride = x.shape, kernel, stride
        windows = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
        n, ho, wo, c = windows.shape[:4]
        return windows.reshape(n, ho, wo, c, kernel * kernel)


class MaxPool2d(_Pool2d):
    name = "max_pool2d"

    def forward(self, x, kernel=2, stride=2):
        windows = self._windows(x, kernel, stride)
        self.argmax = windows.argmax(axis=-1)
        return windows.max(axis=-1)

    def backward(self, grad):
        k = self.kernel
        n, ho, wo, c = grad.shape
        routed = np.zeros((n, ho, wo, k, k, c), dtype=grad.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            routed[:, :, :, i, j, :] = np.where(self.argmax == idx, grad, 0)
        dx = np.zeros(self.x_shape, dtype=grad.dtype)
        _scatter_windows(dx, routed, self.stride)
        return (dx,)


class AvgPool2d(_Pool2d):
    name = "avg_pool2d"

    def forward(self, x, kernel=2, stride=2):
        return self._windows(x, kernel, stride).mean(axis=-1)

    def backward(self, grad):
        k = self.kernel
        share = grad / (k * k)
        routed = np.broadcast_to(share[:, :, :, None, None, :], grad.shape[:3] + (k, k, grad.shape[3]))
        dx = np.zeros(self.x_shape, dtype=grad.dtype)
        _scatter_windows(dx, routed, self.stride)
        return (dx,)


class BatchNorm(Function):
    """Normalization over every axis but the last (channels)."""

    name = "batch_norm"

    def forward(self, x, gamma, beta, mean=None, var=None, eps=1e-5, batch_stats=True):
        channels = x.shape[-1]
        if gamma.shape != (channels,) or beta.shape != (channels,):
            raise ShapeError(f"batch_norm: input {x.shape} incompatible with scale {gamma.shape} / shift {beta.shape}")
        self.axes = tuple(range(x.ndim - 1))
        self.count = x.size // channels
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gamma, self.batch_stats = gamma, batch_stats
        return self.xhat * gamma + beta

    def backward(self, grad):
        dgamma = (grad * self.xhat).sum(axis=self.axes)
        dbeta = grad.sum(axis=self.axes)
        dxhat = grad * self.gamma
        if self.batch_stats:
            m = self.count
            dx = (self.inv_std / m) * (
                m * dxhat
                - dxhat.sum(axis=self.axes)
                - self.xhat * (dxhat * self.xhat).sum(axis=self.axes)
            )
        else:
            dx = dxhat * self.inv_std
        return dx, dgamma, dbeta


class LogSoftmax(Function):
    """Log-softmax over the last axis with max subtraction."""

    name = "log_softmax"

    def forward(self, z):
        shifted = z - z.max(axis=-1, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return self.out

    def backward(self, grad):
        return (grad - np.exp(self.out) * grad.sum(axis=-1, keepdims=True),)


def bilinear_sample_array(
    img: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    fill: Union[float, np.ndarray] = 0.0,
) -> np.ndarray:
    """
    Sample an (H, W, C) or (N, H, W, C) array at fractional pixel coordinates.

    Pixel centers sit at integer coordinates; neighbours outside the image
    contribute `fill` (scalar or per-channel). Sampling at integer
    coordinates returns the stored pixel exactly.
    """
    height, width = img.shape[-3], img.shape[-2]
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    fill = np.asarray(fill, dtype=img.dtype)
    out = np.zeros(img.shape[:-3] + rows.shape + img.shape[-1:], dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            valid = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
            values = img[..., np.clip(rr, 0, height - 1), np.clip(cc, 0, width - 1), :]
            values = np.where(valid[..., None], values, fill)
            out += (wr * wc)[..., None] * values
    return out.astype(img.dtype)


class BilinearSample(Function):
    name = "bilinear_sample"

    def forward(self, x, rows=None, cols=None, fill=0.0):
        if x.ndim != 4 or rows.shape != cols.shape or rows.ndim != 2:
            raise ShapeError(f"bilinear_sample: input {x.shape} with coordinate grids {rows.shape} / {cols.shape}")
        self.x_shape, self.rows, self.cols = x.shape, rows, cols
        return bilinear_sample_array(x, rows, cols, fill)

    def backward(self, grad):
        height, width = self.x_shape[1:3]
        r0 = np.floor(self.rows).astype(np.int64)
        c0 = np.floor(self.cols).astype(np.int64)
        fr, fc = self.rows - r0, self.cols - c0
        dx = np.zeros(self.x_shape, dtype=grad.dtype)
        for dr, wr in ((0, 1.0 - fr), (1, fr)):
            for dc, wc in ((0, 1.0 - fc), (1, fc)):
                rr, cc = r0 + dr, c0 + dc
                valid = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
                contribution = (wr * wc)[None, :, :, None] * grad
                np.add.at(dx, (slice(None), rr[valid], cc[valid]), contribution[:, valid].astype(grad.dtype))
        return (dx,)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def relu(a: Tensor) -> Tensor:
    return Relu.apply(a)


def sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def pad(a: Tensor, pad_width: Sequence[Tuple[int, int]]) -> Tensor:
    return Pad.apply(a, pad_width=tuple(tuple(p) for p in pad_width))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    return Conv2d.apply(x, w, stride=stride, padding=padding)


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    return MaxPool2d.apply(x, kernel=kernel, stride=stride or kernel)


def avg_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    return AvgPool2d.apply(x, kernel=kernel, stride=stride or kernel)


def log_softmax(z: Tensor) -> Tensor:
    return LogSoftmax.apply(z)


def softmax(z: Tensor) -> Tensor:
    return exp(log_softmax(z))


def softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def bilinear_sample(x: Tensor, rows: np.ndarray, cols: np.ndarray, fill: Union[float, np.ndarray] = 0.0) -> Tensor:
    return BilinearSample.apply(x, rows=np.asarray(rows, dtype=np.float64), cols=np.asarray(cols, dtype=np.float64), fill=fill)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Batch normalization with running statistics.

    In train mode the batch statistics normalize the input and the returned
    running statistics are `momentum * running + (1 - momentum) * batch`
    (unbiased batch variance). In eval mode the running statistics are used
    and returned unchanged.

    Returns:
        (output, running_mean, running_var)
    """
    if not train:
        out = BatchNorm.apply(x, gamma, beta, mean=running_mean, var=running_var, eps=eps, batch_stats=False)
        return out, running_mean, running_var
    axes = tuple(range(x.ndim - 1))
    batch_mean = x.data.mean(axis=axes)
    batch_var = x.data.var(axis=axes)
    out = BatchNorm.apply(x, gamma, beta, mean=batch_mean, var=batch_var, eps=eps, batch_stats=True)
    count = x.data.size // x.shape[-1]
    unbiased = batch_var * (count / (count - 1)) if count > 1 else batch_var
    new_mean = (momentum * running_mean + (1.0 - momentum) * batch_mean).astype(running_mean.dtype)
    new_var = (momentum * running_var + (1.0 - momentum) * unbiased).astype(running_var.dtype)
    return out, new_mean, new_var
