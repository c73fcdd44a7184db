"""Forward and backward passes for every layer kind used by the networks.

All convolutions are 3x3, same-padded, bias-free. A separable convolution is a
per-channel depthwise 3x3 filter followed by a 1x1 pointwise channel mix; the
plain full convolution is kept as the reference it factorizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensors import conv_output_size, pad_amounts, pad_same

KERNEL = 3


@dataclass
class ConvParams:
    """Separable convolution weights: one 3x3 plane per input channel plus a
    (out, in) pointwise mixing matrix. No bias term exists."""

    depthwise: np.ndarray
    pointwise: np.ndarray

    def __post_init__(self):
        if self.depthwise.ndim != 3 or self.depthwise.shape[1:] != (KERNEL, KERNEL):
            raise ShapeError(f"depthwise must be (in, {KERNEL}, {KERNEL}), got {self.depthwise.shape}")
        if self.pointwise.ndim != 2:
            raise ShapeError(f"pointwise must be 2-D, got {self.pointwise.shape}")
        if self.pointwise.shape[1] != self.depthwise.shape[0]:
            raise ShapeError(
                f"pointwise expects {self.pointwise.shape[1]} input channels, "
                f"depthwise provides {self.depthwise.shape[0]}"
            )

    @property
    def in_channels(self) -> int:
        return self.depthwise.shape[0]

    @property
    def out_channels(self) -> int:
        return self.pointwise.shape[0]


@dataclass
class BatchNormParams:
    """Per-channel batch normalization parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        n = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} must have shape ({n},)")
        if self.epsilon <= 0:
            raise ShapeError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ShapeError("momentum must be in (0, 1)")
        if np.any(self.running_var < 0):
            raise ShapeError("running_var must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class FlopReport:
    """Multiply-add counts of a full convolution and its separable factorization."""

    multiply_adds_full: int
    multiply_adds_separable: int

    @property
    def ratio(self) -> float:
        return self.multiply_adds_separable / self.multiply_adds_full


def full_conv_forward(x: np.ndarray, weights: np.ndarray, stride: int = 1) -> np.ndarray:
    """Standard cross-correlation with (out, in, K, K) weights, same padding."""
    out_ch, in_ch, kh, kw = weights.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got {kh}x{kw}")
    if x.shape[1] != in_ch:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {in_ch}")
    xp = pad_same(x, kh, stride)
    oh = conv_output_size(x.shape[2], stride)
    ow = conv_output_size(x.shape[3], stride)
    y = np.zeros((x.shape[0], out_ch, oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride]
            y += np.einsum("oc,bchw->bohw", weights[:, :, u, v], patch)
    return y


def _depthwise_forward(x: np.ndarray, kernels: np.ndarray, stride: int) -> np.ndarray:
    if x.shape[1] != kernels.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, depthwise expects {kernels.shape[0]}")
    kh = kernels.shape[1]
    xp = pad_same(x, kh, stride)
    oh = conv_output_size(x.shape[2], stride)
    ow = conv_output_size(x.shape[3], stride)
    y = np.zeros((x.shape[0], x.shape[1], oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kh):
            patch = xp[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride]
            y += kernels[:, u, v][None, :, None, None] * patch
    return y


def _pointwise_forward(z: np.ndarray, pointwise: np.ndarray) -> np.ndarray:
    b, c, h, w = z.shape
    mixed = np.matmul(pointwise, z.reshape(b, c, h * w))
    return mixed.reshape(b, pointwise.shape[0], h, w)


def separable_conv_forward(x: np.ndarray, params: ConvParams, stride: int = 1) -> np.ndarray:
    """Depthwise 3x3 stage (with stride) followed by the 1x1 pointwise mix."""
    return _pointwise_forward(_depthwise_forward(x, params.depthwise, stride), params.pointwise)


def _depthwise_backward(x, kernels, stride, dz):
    kh = kernels.shape[1]
    xp = pad_same(x, kh, stride)
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernels)
    oh, ow = dz.shape[2], dz.shape[3]
    for u in range(kh):
        for v in range(kh):
            patch = xp[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride]
            dk[:, u, v] = np.einsum("bchw,bchw->c", dz, patch)
            dxp[:, :, u : u + oh * stride : stride, v : v + ow * stride : stride] += (
                kernels[:, u, v][None, :, None, None] * dz
            )
    top, _ = pad_amounts(x.shape[2], kh, stride)
    left, _ = pad_amounts(x.shape[3], kh, stride)
    dx = dxp[:, :, top : top + x.shape[2], left : left + x.shape[3]]
    return dx, dk


def separable_conv_backward(
    x: np.ndarray,
    params: ConvParams,
    stride: int,
    dy: np.ndarray,
    depthwise_out: np.ndarray | None = None,
):
    """Gradients of the separable conv: (d_input, d_depthwise, d_pointwise)."""
    if dy.shape[1] != params.out_channels:
        raise ShapeError(f"dy has {dy.shape[1]} channels, conv outputs {params.out_channels}")
    if depthwise_out is None:
        depthwise_out = _depthwise_forward(x, params.depthwise, stride)
    b, out_ch, oh, ow = dy.shape
    dyr = dy.reshape(b, out_ch, oh * ow)
    zr = depthwise_out.reshape(b, params.in_channels, oh * ow)
    d_pointwise = np.matmul(dyr, zr.transpose(0, 2, 1)).sum(axis=0)
    dz = np.matmul(params.pointwise.T, dyr).reshape(b, params.in_channels, oh, ow)
    dx, d_depthwise = _depthwise_backward(x, params.depthwise, stride, dz)
    return dx, d_depthwise, d_pointwise


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def maxpool_forward(x: np.ndarray):
    """2x2 max pooling, stride 2. Returns (pooled, argmax indices).

    Ties go to the first maximum in row-major window order.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    windows = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    indices = windows.argmax(axis=4)
    pooled = np.take_along_axis(windows, indices[..., None], axis=4)[..., 0]
    return pooled, indices


def maxpool_backward(indices: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Route each gradient to its window's argmax position, zeros elsewhere."""
    b, c, oh, ow = dy.shape
    if indices.shape != dy.shape:
        raise ShapeError("indices and dy shapes differ")
    windows = np.zeros((b, c, oh, ow, 4), dtype=dy.dtype)
    np.put_along_axis(windows, indices[..., None], dy[..., None], axis=4)
    return (
        windows.reshape(b, c, oh, ow, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, 2 * oh, 2 * ow)
    )


def upsample_nearest_forward(x: np.ndarray, factor: int) -> np.ndarray:
    """Replicate every pixel factor x factor."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def upsample_nearest_backward(dy: np.ndarray, factor: int) -> np.ndarray:
    """Sum each factor x factor block of the incoming gradient."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    b, c, h, w = dy.shape
    if h % factor or w % factor:
        raise ShapeError(f"gradient dims {h}x{w} not divisible by factor {factor}")
    return dy.reshape(b, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray


def batchnorm_forward(x: np.ndarray, params: BatchNormParams, train: bool = False):
    """Normalize per channel. Returns (y, cache); cache is None in inference mode.

    Train mode normalizes by batch statistics over (batch, H, W) and updates the
    running statistics in place with exponential factor `momentum`.
    """
    if x.shape[1] != params.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, batch norm expects {params.channels}")
    gamma = params.gamma[None, :, None, None]
    beta = params.beta[None, :, None, None]
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        params.running_mean *= params.momentum
        params.running_mean += (1.0 - params.momentum) * mean
        params.running_var *= params.momentum
        params.running_var += (1.0 - params.momentum) * var
        inv_std = 1.0 / np.sqrt(var + params.epsilon)
        x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        return gamma * x_hat + beta, BatchNormCache(x_hat, inv_std)
    inv_std = 1.0 / np.sqrt(params.running_var + params.epsilon)
    y = gamma * (x - params.running_mean[None, :, None, None]) * inv_std[None, :, None, None] + beta
    return y, None


def batchnorm_backward(cache: BatchNormCache, params: BatchNormParams, dy: np.ndarray):
    """Gradients through train-mode batch norm: (dx, dgamma, dbeta)."""
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * cache.x_hat).sum(axis=(0, 2, 3))
    scale = (params.gamma * cache.inv_std / n)[None, :, None, None]
    dx = scale * (
        n * dy - dbeta[None, :, None, None] - cache.x_hat * dgamma[None, :, None, None]
    )
    return dx, dgamma, dbeta


def softmax_pixelwise_forward(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over channels with max-subtraction for stability."""
    if x.shape[1] < 2:
        raise ShapeError(f"softmax needs >= 2 channels, got {x.shape[1]}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def flops_separable(in_ch: int, out_ch: int, height: int, width: int, stride: int = 1) -> FlopReport:
    """Multiply-add counts for a full 3x3 conv and its separable factorization."""
    if min(in_ch, out_ch, height, width, stride) < 1:
        raise ShapeError("all counts must be >= 1")
    oh = conv_output_size(height, stride)
    ow = conv_output_size(width, stride)
    full = out_ch * in_ch * KERNEL * KERNEL * oh * ow
    separable = in_ch * KERNEL * KERNEL * oh * ow + out_ch * in_ch * oh * ow
    return FlopReport(full, separable)


def cost_ratio(n_out: int, kernel: int = KERNEL) -> float:
    """Separable/full cost factor 1/N + 1/K^2 for N output features, K kernel."""
    if n_out < 1 or kernel < 1:
        raise ShapeError("counts must be >= 1")
    return 1.0 / n_out + 1.0 / (kernel * kernel)
