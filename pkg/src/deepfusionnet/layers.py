"""Differentiable layers: convolution, pooling, activations, attention.

Forward functions take and return ``Tensor4`` and record themselves on the
active tape.  Parameter bundles are plain containers; the ``init_*``
factories draw Kaiming-uniform weights from a caller-supplied generator so
a whole model is reproducible from one integer seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ShapeError,
    Tensor4,
    add,
    concat_channels,
    mul_channel_scale,
    mul_spatial_scale,
    record_op,
)


# ---------------------------------------------------------------------------
# parameter containers
#
# named_tensors() yields (name, tensor, learnable) in a fixed order; the
# checkpoint manifest and the parameter counter both rely on that order.


@dataclass
class ConvParams:
    weight: Tensor4
    bias: Tensor4 | None

    def named_tensors(self, prefix: str):
        yield prefix + ".weight", self.weight, True
        if self.bias is not None:
            yield prefix + ".bias", self.bias, True


@dataclass
class PReLUParams:
    alpha: Tensor4

    def named_tensors(self, prefix: str):
        yield prefix + ".alpha", self.alpha, True


class BatchNormState:
    """Per-channel affine normalizer with running statistics.

    ``training`` selects batch statistics (and updates the running buffers)
    versus the frozen running statistics.  The normalizer uses the biased
    batch variance; the running-variance update stores the unbiased one.
    """

    def __init__(self, gamma: Tensor4, beta: Tensor4, running_mean: Tensor4,
                 running_var: Tensor4, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def named_tensors(self, prefix: str):
        yield prefix + ".gamma", self.gamma, True
        yield prefix + ".beta", self.beta, True
        yield prefix + ".running_mean", self.running_mean, False
        yield prefix + ".running_var", self.running_var, False


@dataclass
class GhostConvParams:
    """A pointwise primary conv plus a cheap depthwise conv, concatenated."""

    primary: ConvParams
    cheap: ConvParams

    def named_tensors(self, prefix: str):
        yield from self.primary.named_tensors(prefix + ".primary")
        yield from self.cheap.named_tensors(prefix + ".cheap")


@dataclass
class CBAMParams:
    """Channel attention MLP (two pointwise convs) plus a spatial 7x7 conv."""

    fc1: ConvParams
    fc2: ConvParams
    spatial: ConvParams

    def named_tensors(self, prefix: str):
        yield from self.fc1.named_tensors(prefix + ".fc1")
        yield from self.fc2.named_tensors(prefix + ".fc2")
        yield from self.spatial.named_tensors(prefix + ".spatial")


# ---------------------------------------------------------------------------
# initializers


def init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int,
              groups: int = 1, bias: bool = True, dtype=np.float32) -> ConvParams:
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels ({c_in}->{c_out}) not divisible by groups={groups}")
    fan_in = (c_in // groups) * k * k
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, (c_out, c_in // groups, k, k)).astype(dtype)
    weight = Tensor4(w, requires_grad=True)
    b = Tensor4(np.zeros((1, c_out, 1, 1), dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(weight, b)


def init_prelu(c: int, dtype=np.float32) -> PReLUParams:
    return PReLUParams(Tensor4(np.full((1, c, 1, 1), 0.25, dtype=dtype), requires_grad=True))


def init_batch_norm(c: int, momentum: float = 0.1, eps: float = 1e-5,
                    dtype=np.float32) -> BatchNormState:
    return BatchNormState(
        gamma=Tensor4(np.ones((1, c, 1, 1), dtype=dtype), requires_grad=True),
        beta=Tensor4(np.zeros((1, c, 1, 1), dtype=dtype), requires_grad=True),
        running_mean=Tensor4(np.zeros((1, c, 1, 1), dtype=dtype)),
        running_var=Tensor4(np.ones((1, c, 1, 1), dtype=dtype)),
        momentum=momentum,
        eps=eps,
    )


def init_ghost_conv(rng: np.random.Generator, c_in: int, c_out: int,
                    dtype=np.float32) -> GhostConvParams:
    if c_out % 2:
        raise ShapeError(f"ghost conv output channels must be even, got {c_out}")
    half = c_out // 2
    return GhostConvParams(
        primary=init_conv(rng, half, c_in, 1, dtype=dtype),
        cheap=init_conv(rng, half, half, 3, groups=half, dtype=dtype),
    )


def init_cbam(rng: np.random.Generator, c: int, reduction: int = 8,
              mlp_bias: bool = True, dtype=np.float32) -> CBAMParams:
    if c % reduction:
        raise ShapeError(f"channels {c} not divisible by attention reduction {reduction}")
    hidden = c // reduction
    return CBAMParams(
        fc1=init_conv(rng, hidden, c, 1, bias=mlp_bias, dtype=dtype),
        fc2=init_conv(rng, c, hidden, 1, bias=mlp_bias, dtype=dtype),
        spatial=init_conv(rng, 1, 2, 7, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor4, w: Tensor4, b: Tensor4 | None = None,
           padding: int = 0, groups: int = 1) -> Tensor4:
    """Stride-1 2-d cross-correlation with symmetric zero padding.

    ``w`` is (c_out, c_in/groups, kh, kw); group i consumes input channels
    [i*c_in/g, (i+1)*c_in/g) and fills output channels [i*c_out/g, ...).
    The forward im2col buffer is kept alive for the backward pass.
    """
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"groups={groups} does not divide channels {cin}->{cout}")
    if cin_g != cin // groups:
        raise ShapeError(f"weight expects {cin_g} channels per group, input has {cin // groups}")
    if x.dtype != w.dtype:
        raise TypeError(f"dtype mismatch: input {x.dtype} vs weight {w.dtype}")
    if b is not None and b.shape != (1, cout, 1, 1):
        raise ShapeError(f"bias shape {b.shape} != (1, {cout}, 1, 1)")
    ho = h + 2 * padding - kh + 1
    wo = wd + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} with padding {padding} exceeds input {h}x{wd}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (n, cin, ho, wo, kh, kw)
    L = ho * wo
    ck = cin_g * kh * kw
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, groups, ck, L)
    wm = w.data.reshape(groups, cout // groups, ck)
    y = np.matmul(wm[None], cols).reshape(n, cout, ho, wo)
    if b is not None:
        y = y + b.data
    out = Tensor4(y)

    x_req, w_req = x.requires_grad, w.requires_grad
    b_req = b is not None and b.requires_grad
    cout_g = cout // groups
    hp, wp = h + 2 * padding, wd + 2 * padding
    dtype = x.dtype

    def bw(g):
        gm = g.reshape(n, groups, cout_g, L)
        grad_x = grad_w = grad_b = None
        if w_req:
            grad_w = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(cout, cin_g, kh, kw)
        if b_req:
            grad_b = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        if x_req:
            gcols = np.matmul(wm.transpose(0, 2, 1)[None], gm).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros((n, cin, hp, wp), dtype=dtype)
            # scatter-add each kernel tap back onto the padded plane
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
            grad_x = gxp[:, :, padding:padding + h, padding:padding + wd]
        if b is None:
            return grad_x, grad_w
        return grad_x, grad_w, grad_b

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor4, w: Tensor4, b: Tensor4 | None = None,
                     padding: int = 0) -> Tensor4:
    """Per-channel convolution: groups equal to the channel count."""
    if w.shape[1] != 1:
        raise ShapeError(f"depthwise weight needs 1 channel per group, got {w.shape[1]}")
    return conv2d(x, w, b, padding=padding, groups=x.c)


# ---------------------------------------------------------------------------
# resampling


def max_pool2(x: Tensor4) -> Tensor4:
    """2x2 max pool, stride 2.  Ties route the gradient to the first
    maximum in row-major window order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    blocks = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(blocks, axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = Tensor4(y)

    def bw(g):
        gz = np.zeros((n, c, h2, w2, 4), dtype=x.dtype)
        np.put_along_axis(gz, idx[..., None], g[..., None], axis=-1)
        return (gz.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return record_op("max_pool2", out, (x,), bw)


def upsample_nearest2(x: Tensor4) -> Tensor4:
    """Nearest-neighbour 2x upsample; backward sums each 2x2 block."""
    n, c, h, w = x.shape
    out = Tensor4(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record_op("upsample_nearest2", out, (x,), bw)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor4) -> Tensor4:
    mask = x.data > 0
    out = Tensor4(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False))
    return record_op("relu", out, (x,), lambda g: (g * mask,))


def prelu(x: Tensor4, p: PReLUParams) -> Tensor4:
    """Leaky activation with one learned negative slope per channel."""
    a = p.alpha
    if a.shape != (1, x.c, 1, 1):
        raise ShapeError(f"prelu alpha shape {a.shape} != (1, {x.c}, 1, 1)")
    xd, ad = x.data, a.data
    pos = xd > 0
    out = Tensor4(np.where(pos, xd, ad * xd))

    def bw(g):
        gx = g * np.where(pos, x.dtype.type(1.0), ad)
        ga = (g * np.where(pos, x.dtype.type(0.0), xd)).sum(axis=(0, 2, 3)).reshape(1, x.c, 1, 1)
        return gx, ga

    return record_op("prelu", out, (x, a), bw)


def sigmoid(x: Tensor4) -> Tensor4:
    # exp of a non-positive number only: no overflow at either extreme
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    out = Tensor4(y)
    return record_op("sigmoid", out, (x,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x: Tensor4, st: BatchNormState) -> Tensor4:
    """Normalize per channel, then apply the learned affine.

    Training mode normalizes with the biased batch variance and folds the
    batch statistics into the running buffers (unbiased variance there).
    Eval mode normalizes with the frozen running statistics.
    """
    if st.gamma.shape != (1, x.c, 1, 1):
        raise ShapeError(f"batch_norm built for {st.gamma.c} channels, input has {x.c}")
    xd = x.data
    m = x.n * x.h * x.w
    if st.training:
        if m < 2:
            raise ShapeError("training-mode batch_norm needs >= 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        mom = st.momentum
        st.running_mean.data[...] = (1.0 - mom) * st.running_mean.data + mom * mu
        st.running_var.data[...] = (1.0 - mom) * st.running_var.data + mom * (var * m / (m - 1))
    else:
        mu = st.running_mean.data
        var = st.running_var.data
    ivar = 1.0 / np.sqrt(var + st.eps)
    xhat = (xd - mu) * ivar
    gd, bd = st.gamma.data, st.beta.data
    out = Tensor4(gd * xhat + bd)
    train_mode = st.training

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, x.c, 1, 1)
        dbeta = g.sum(axis=(0, 2, 3)).reshape(1, x.c, 1, 1)
        dxhat = g * gd
        if train_mode:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (ivar / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * ivar
        return dx, dgamma, dbeta

    return record_op("batch_norm", out, (x, st.gamma, st.beta), bw)


# ---------------------------------------------------------------------------
# attention


def global_avg_pool(x: Tensor4) -> Tensor4:
    n, c, h, w = x.shape
    out = Tensor4(x.data.mean(axis=(2, 3), keepdims=True))

    def bw(g):
        return (np.broadcast_to(g / (h * w), (n, c, h, w)).astype(x.dtype, copy=False),)

    return record_op("global_avg_pool", out, (x,), bw)


def global_max_pool(x: Tensor4) -> Tensor4:
    """Spatial max per (sample, channel); ties route to the first maximum
    in row-major order."""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = np.argmax(flat, axis=2)
    out = Tensor4(np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1))

    def bw(g):
        gz = np.zeros((n, c, h * w), dtype=x.dtype)
        np.put_along_axis(gz, idx[..., None], g.reshape(n, c, 1), axis=2)
        return (gz.reshape(n, c, h, w),)

    return record_op("global_max_pool", out, (x,), bw)


def channel_mean(x: Tensor4) -> Tensor4:
    n, c, h, w = x.shape
    out = Tensor4(x.data.mean(axis=1, keepdims=True))

    def bw(g):
        return (np.broadcast_to(g / c, (n, c, h, w)).astype(x.dtype, copy=False),)

    return record_op("channel_mean", out, (x,), bw)


def channel_max(x: Tensor4) -> Tensor4:
    """Max across channels; ties route to the lowest channel index."""
    n, c, h, w = x.shape
    idx = np.argmax(x.data, axis=1, keepdims=True)
    out = Tensor4(np.take_along_axis(x.data, idx, axis=1))

    def bw(g):
        gz = np.zeros((n, c, h, w), dtype=x.dtype)
        np.put_along_axis(gz, idx, g, axis=1)
        return (gz,)

    return record_op("channel_max", out, (x,), bw)


def ghost_conv(x: Tensor4, p: GhostConvParams) -> Tensor4:
    """Half the output channels from a pointwise conv, the other half from
    a cheap depthwise 3x3 over the first half, concatenated."""
    primary = conv2d(x, p.primary.weight, p.primary.bias)
    cheap = conv2d(primary, p.cheap.weight, p.cheap.bias, padding=1, groups=primary.c)
    return concat_channels(primary, cheap)


def cbam(x: Tensor4, p: CBAMParams) -> Tensor4:
    """Channel attention then spatial attention; shape is preserved.

    The channel gate feeds global average and max pools through a shared
    two-layer pointwise MLP.  The spatial gate is a 7x7 conv over the
    channelwise mean and max of the channel-refined map.
    """

    def mlp(v: Tensor4) -> Tensor4:
        return conv2d(relu(conv2d(v, p.fc1.weight, p.fc1.bias)), p.fc2.weight, p.fc2.bias)

    gate_c = sigmoid(add(mlp(global_avg_pool(x)), mlp(global_max_pool(x))))
    refined = mul_channel_scale(x, gate_c)
    summary = concat_channels(channel_mean(refined), channel_max(refined))
    gate_s = sigmoid(conv2d(summary, p.spatial.weight, p.spatial.bias, padding=3))
    return mul_spatial_scale(refined, gate_s)
