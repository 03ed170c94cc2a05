"""Image quality metrics: MSE, MAE, PSNR, SSIM, and the training objective.

Everything except PSNR is built from tape ops, so each metric is
differentiable and can sit on the loss path.  SSIM follows the standard
windowed formulation: local statistics come from a fixed (non-learnable)
Gaussian window applied per channel over the valid region, i.e. no padding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import depthwise_conv2d
from .tensor import (
    ShapeError,
    Tensor4,
    absval,
    add,
    add_scalar,
    div,
    mean_all,
    mul,
    mul_scalar,
    sub,
)


@dataclass(frozen=True)
class SSIMConfig:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


@dataclass
class MetricRecord:
    """One evaluated split: the delimited row the CLI prints and tests parse."""

    epoch: int
    split: str
    psnr: float
    ssim: float
    mse: float
    mae: float
    hybrid: float

    HEADER = "epoch,split,psnr,ssim,mse,mae,hybrid"

    def row(self) -> str:
        vals = (self.psnr, self.ssim, self.mse, self.mae, self.hybrid)
        return ",".join([str(self.epoch), self.split] + [format_value(v) for v in vals])


def format_value(v: float) -> str:
    """Shortest round-trip decimal; infinities serialize as 'inf'/'-inf'."""
    return repr(float(v))


def gaussian_window(size: int, sigma: float, dtype=np.float64) -> np.ndarray:
    """2-d Gaussian tap matrix normalized to sum exactly 1."""
    if size < 1 or size % 2 == 0:
        raise ShapeError(f"window size must be odd and positive, got {size}")
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return (w / w.sum()).astype(dtype)


def _check_pair(a: Tensor4, b: Tensor4, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def mse(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_pair(a, b, "mse")
    d = sub(a, b)
    return mean_all(mul(d, d))


def mae(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_pair(a, b, "mae")
    return mean_all(absval(sub(a, b)))


def psnr(mse_value: float, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; a zero-error pair maps to +inf."""
    if mse_value < 0:
        raise ValueError(f"mse must be >= 0, got {mse_value}")
    if mse_value == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse_value)


def ssim(a: Tensor4, b: Tensor4, config: SSIMConfig = SSIMConfig()) -> Tensor4:
    """Mean structural similarity over all valid window positions.

    Local means, variances, and the covariance are Gaussian-weighted window
    statistics computed with a frozen depthwise convolution, so the result
    stays differentiable with respect to both images.
    """
    _check_pair(a, b, "ssim")
    k = config.window_size
    if a.h < k or a.w < k:
        raise ShapeError(f"ssim window {k}x{k} exceeds image {a.h}x{a.w}")
    win = gaussian_window(k, config.sigma, dtype=a.dtype)
    kernel = Tensor4(np.broadcast_to(win, (a.c, 1, k, k)).copy())

    mu_a = depthwise_conv2d(a, kernel)
    mu_b = depthwise_conv2d(b, kernel)
    var_a = sub(depthwise_conv2d(mul(a, a), kernel), mul(mu_a, mu_a))
    var_b = sub(depthwise_conv2d(mul(b, b), kernel), mul(mu_b, mu_b))
    cov = sub(depthwise_conv2d(mul(a, b), kernel), mul(mu_a, mu_b))

    lum = add_scalar(mul_scalar(mul(mu_a, mu_b), 2.0), config.c1)
    lum_d = add_scalar(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), config.c1)
    struct = add_scalar(mul_scalar(cov, 2.0), config.c2)
    struct_d = add_scalar(add(var_a, var_b), config.c2)
    return mean_all(div(mul(lum, struct), mul(lum_d, struct_d)))


def hybrid_loss(pred: Tensor4, target: Tensor4, lam: float = 0.7,
                config: SSIMConfig = SSIMConfig()) -> Tensor4:
    """mse + lam * (1 - ssim): pixel fidelity plus structural fidelity."""
    dissim = add_scalar(mul_scalar(ssim(pred, target, config), -1.0), 1.0)
    return add(mse(pred, target), mul_scalar(dissim, lam))
