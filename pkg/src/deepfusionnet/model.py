"""Network assembly: a dual-branch head, ghost-residual encoder, densely
connected bottleneck, and a skip-concatenating decoder, with per-stage
attention throughout.

One ``Model`` serves two tasks.  The enhancement variant maps an image to an
equally sized restored image; the 2x variant appends an extra upsampling
head so the output doubles each spatial side.  Channel widths come from
``ModelConfig``; the two shipped presets are ``enhancement_preset`` and
``sr_preset``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    BatchNormState,
    CBAMParams,
    ConvParams,
    GhostConvParams,
    PReLUParams,
    batch_norm,
    cbam,
    conv2d,
    depthwise_conv2d,
    ghost_conv,
    init_batch_norm,
    init_cbam,
    init_conv,
    init_ghost_conv,
    init_prelu,
    max_pool2,
    prelu,
    sigmoid,
    upsample_nearest2,
)
from .tensor import ShapeError, Tensor4, add, concat_channels, make_rng

TASKS = ("enhancement", "sr")


@dataclass
class ModelConfig:
    task: str = "enhancement"
    in_channels: int = 3
    head_width: int = 16
    encoder_channels: tuple = (64, 128, 256)
    bottleneck_reduced: int = 128
    bottleneck_growth: int = 64
    bottleneck_layers: int = 3
    decoder_channels: tuple = (128, 64, 32)
    cbam_reduction: int = 8
    sr_mid_width: int = 16

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.in_channels < 1 or self.head_width < 1:
            raise ValueError("in_channels and head_width must be >= 1")
        if len(self.encoder_channels) != 3 or len(self.decoder_channels) != 3:
            raise ValueError("encoder_channels and decoder_channels need exactly 3 entries")
        widths = list(self.encoder_channels) + list(self.decoder_channels)
        widths += [self.bottleneck_reduced, self.bottleneck_growth, self.sr_mid_width]
        if any(w < 1 for w in widths):
            raise ValueError("all channel widths must be >= 1")
        if self.bottleneck_layers < 1:
            raise ValueError("bottleneck_layers must be >= 1")
        # ghost stages emit encoder_channels[1], [2], [2]: each must split in half
        for c in (self.encoder_channels[1], self.encoder_channels[2]):
            if c % 2:
                raise ValueError(f"encoder ghost output width {c} must be even")
        attended = list(self.encoder_channels) + list(self.decoder_channels)
        attended.append(self.encoder_channels[2])
        for c in attended:
            if c % self.cbam_reduction:
                raise ValueError(
                    f"attention width {c} not divisible by cbam_reduction={self.cbam_reduction}")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "in_channels": self.in_channels,
            "head_width": self.head_width,
            "encoder_channels": list(self.encoder_channels),
            "bottleneck_reduced": self.bottleneck_reduced,
            "bottleneck_growth": self.bottleneck_growth,
            "bottleneck_layers": self.bottleneck_layers,
            "decoder_channels": list(self.decoder_channels),
            "cbam_reduction": self.cbam_reduction,
            "sr_mid_width": self.sr_mid_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            task=d["task"],
            in_channels=d["in_channels"],
            head_width=d["head_width"],
            encoder_channels=tuple(d["encoder_channels"]),
            bottleneck_reduced=d["bottleneck_reduced"],
            bottleneck_growth=d["bottleneck_growth"],
            bottleneck_layers=d["bottleneck_layers"],
            decoder_channels=tuple(d["decoder_channels"]),
            cbam_reduction=d["cbam_reduction"],
            sr_mid_width=d["sr_mid_width"],
        )
        cfg.validate()
        return cfg


def enhancement_preset() -> ModelConfig:
    return ModelConfig(task="enhancement")


def sr_preset() -> ModelConfig:
    return ModelConfig(
        task="sr",
        head_width=4,
        encoder_channels=(16, 32, 48),
        bottleneck_reduced=32,
        bottleneck_growth=16,
        bottleneck_layers=3,
        decoder_channels=(16, 8, 8),
        sr_mid_width=16,
    )


@dataclass(frozen=True)
class ParameterReport:
    """Per-tensor (name, shape, count) rows over the learnable parameters."""

    rows: tuple
    total: int


def parameter_report(model: "Model") -> ParameterReport:
    rows = tuple(
        (name, t.shape, t.data.size)
        for name, t, learnable in model.named_tensors() if learnable
    )
    return ParameterReport(rows=rows, total=sum(r[2] for r in rows))


@dataclass
class _EncoderStage:
    ghost: GhostConvParams
    act: PReLUParams
    conv: ConvParams
    bn: BatchNormState
    skip: ConvParams
    att: CBAMParams


@dataclass
class _DecoderStage:
    conv1: ConvParams
    act: PReLUParams
    conv2: ConvParams
    bn: BatchNormState
    att: CBAMParams


@dataclass
class _DenseLayer:
    conv: ConvParams
    act: PReLUParams


class Model:
    """Parameter store plus the forward wiring.

    ``registry`` maps dotted names to parameter containers in construction
    order; the checkpoint manifest, the optimizer parameter list, and the
    parameter count all walk it identically.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = True
        self.clamp_events = 0  # inputs arrived outside [0, 1] this many times
        self.registry: list[tuple[str, object]] = []

    def _reg(self, name: str, obj):
        self.registry.append((name, obj))
        return obj

    def named_tensors(self):
        for name, obj in self.registry:
            yield from obj.named_tensors(name)

    def parameters(self) -> list[Tensor4]:
        return [t for _, t, learnable in self.named_tensors() if learnable]

    def count_parameters(self) -> int:
        return sum(t.data.size for _, t, learnable in self.named_tensors() if learnable)

    def batch_norms(self) -> list[BatchNormState]:
        return [obj for _, obj in self.registry if isinstance(obj, BatchNormState)]

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for bn in self.batch_norms():
            bn.training = flag

    # forward ---------------------------------------------------------------

    def forward(self, x: Tensor4) -> Tensor4:
        cfg = self.config
        if x.c != cfg.in_channels:
            raise ShapeError(f"model expects {cfg.in_channels} input channels, got {x.c}")
        if x.h % 8 or x.w % 8 or x.h < 8 or x.w < 8:
            raise ShapeError(f"input sides must be multiples of 8, got {x.h}x{x.w}")
        if x.dtype != self.dtype:
            raise TypeError(f"model built for {self.dtype}, input is {x.dtype}")
        lo, hi = float(x.data.min()), float(x.data.max())
        if lo < 0.0 or hi > 1.0:
            # out-of-range inputs are clamped, never rejected; the counter
            # lets callers surface a warning
            self.clamp_events += 1
            x = Tensor4(np.clip(x.data, 0.0, 1.0))

        a1 = prelu(conv2d(x, self.a_conv.weight, self.a_conv.bias, padding=1), self.a_act)
        a2 = depthwise_conv2d(a1, self.a_dw.weight, self.a_dw.bias, padding=1)
        b1 = prelu(conv2d(x, self.b_conv.weight, self.b_conv.bias, padding=2), self.b_act1)
        b2 = prelu(depthwise_conv2d(b1, self.b_dw.weight, self.b_dw.bias, padding=1), self.b_act2)
        fused = concat_channels(concat_channels(a1, a2), concat_channels(b1, b2))
        e = conv2d(fused, self.fuse.weight, self.fuse.bias, padding=1)
        e = batch_norm(prelu(e, self.fuse_act), self.fuse_bn)
        cur = cbam(e, self.fuse_att)

        skips = [cur]
        for stage in self.encoder:
            p = max_pool2(cur)
            main = prelu(ghost_conv(p, stage.ghost), stage.act)
            main = batch_norm(conv2d(main, stage.conv.weight, stage.conv.bias, padding=1), stage.bn)
            shortcut = conv2d(p, stage.skip.weight, stage.skip.bias)
            cur = cbam(add(main, shortcut), stage.att)
            skips.append(cur)
        skips.pop()  # the last stage feeds the bottleneck, not a skip

        feats = [conv2d(cur, self.bott_reduce.weight, self.bott_reduce.bias)]
        for layer in self.bott_dense:
            inp = feats[0]
            for f in feats[1:]:
                inp = concat_channels(inp, f)
            feats.append(prelu(conv2d(inp, layer.conv.weight, layer.conv.bias, padding=1), layer.act))
        cat = feats[0]
        for f in feats[1:]:
            cat = concat_channels(cat, f)
        cur = conv2d(cat, self.bott_fuse.weight, self.bott_fuse.bias)
        cur = cbam(batch_norm(cur, self.bott_bn), self.bott_att)

        for stage, skip in zip(self.decoder, reversed(skips)):
            up = upsample_nearest2(cur)
            cat = concat_channels(up, skip)
            y = prelu(conv2d(cat, stage.conv1.weight, stage.conv1.bias, padding=1), stage.act)
            y = batch_norm(conv2d(y, stage.conv2.weight, stage.conv2.bias, padding=1), stage.bn)
            cur = cbam(y, stage.att)

        if cfg.task == "enhancement":
            return sigmoid(conv2d(cur, self.out_conv.weight, self.out_conv.bias, padding=1))
        up = upsample_nearest2(cur)
        y = prelu(conv2d(up, self.out_conv1.weight, self.out_conv1.bias, padding=1), self.out_act)
        return sigmoid(conv2d(y, self.out_conv2.weight, self.out_conv2.bias, padding=1))


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Construct and initialize a model; one seed fixes every weight."""
    m = Model(config, dtype=dtype)
    rng = make_rng(seed)
    dt = m.dtype
    cfg = config
    w0 = cfg.head_width
    cin = cfg.in_channels
    r = cfg.cbam_reduction

    m.a_conv = m._reg("head.branch_a.conv", init_conv(rng, w0, cin, 3, dtype=dt))
    m.a_act = m._reg("head.branch_a.act", init_prelu(w0, dtype=dt))
    m.a_dw = m._reg("head.branch_a.dw", init_conv(rng, w0, w0, 3, groups=w0, dtype=dt))
    m.b_conv = m._reg("head.branch_b.conv", init_conv(rng, w0, cin, 5, dtype=dt))
    m.b_act1 = m._reg("head.branch_b.act1", init_prelu(w0, dtype=dt))
    m.b_dw = m._reg("head.branch_b.dw", init_conv(rng, w0, w0, 3, groups=w0, dtype=dt))
    m.b_act2 = m._reg("head.branch_b.act2", init_prelu(w0, dtype=dt))
    c1 = cfg.encoder_channels[0]
    m.fuse = m._reg("head.fuse.conv", init_conv(rng, c1, 4 * w0, 3, dtype=dt))
    m.fuse_act = m._reg("head.fuse.act", init_prelu(c1, dtype=dt))
    m.fuse_bn = m._reg("head.fuse.bn", init_batch_norm(c1, dtype=dt))
    m.fuse_att = m._reg("head.fuse.att", init_cbam(rng, c1, r, dtype=dt))

    m.encoder = []
    stage_io = [
        (cfg.encoder_channels[0], cfg.encoder_channels[1]),
        (cfg.encoder_channels[1], cfg.encoder_channels[2]),
        (cfg.encoder_channels[2], cfg.encoder_channels[2]),
    ]
    for k, (ci, co) in enumerate(stage_io, start=1):
        m.encoder.append(_EncoderStage(
            ghost=m._reg(f"enc{k}.ghost", init_ghost_conv(rng, ci, co, dtype=dt)),
            act=m._reg(f"enc{k}.act", init_prelu(co, dtype=dt)),
            conv=m._reg(f"enc{k}.conv", init_conv(rng, co, co, 3, dtype=dt)),
            bn=m._reg(f"enc{k}.bn", init_batch_norm(co, dtype=dt)),
            skip=m._reg(f"enc{k}.skip", init_conv(rng, co, ci, 1, dtype=dt)),
            att=m._reg(f"enc{k}.att", init_cbam(rng, co, r, dtype=dt)),
        ))

    c4 = cfg.encoder_channels[2]
    red, growth = cfg.bottleneck_reduced, cfg.bottleneck_growth
    m.bott_reduce = m._reg("bottleneck.reduce", init_conv(rng, red, c4, 1, dtype=dt))
    m.bott_dense = []
    for i in range(1, cfg.bottleneck_layers + 1):
        dense_in = red + (i - 1) * growth
        m.bott_dense.append(_DenseLayer(
            conv=m._reg(f"bottleneck.dense{i}.conv", init_conv(rng, growth, dense_in, 3, dtype=dt)),
            act=m._reg(f"bottleneck.dense{i}.act", init_prelu(growth, dtype=dt)),
        ))
    cat_width = red + cfg.bottleneck_layers * growth
    m.bott_fuse = m._reg("bottleneck.fuse", init_conv(rng, c4, cat_width, 1, dtype=dt))
    m.bott_bn = m._reg("bottleneck.bn", init_batch_norm(c4, dtype=dt))
    m.bott_att = m._reg("bottleneck.att", init_cbam(rng, c4, r, dtype=dt))

    m.decoder = []
    skip_widths = [cfg.encoder_channels[2], cfg.encoder_channels[1], cfg.encoder_channels[0]]
    up_width = c4
    for j, (dj, sk) in enumerate(zip(cfg.decoder_channels, skip_widths), start=1):
        m.decoder.append(_DecoderStage(
            conv1=m._reg(f"dec{j}.conv1", init_conv(rng, dj, up_width + sk, 3, dtype=dt)),
            act=m._reg(f"dec{j}.act", init_prelu(dj, dtype=dt)),
            conv2=m._reg(f"dec{j}.conv2", init_conv(rng, dj, dj, 3, dtype=dt)),
            bn=m._reg(f"dec{j}.bn", init_batch_norm(dj, dtype=dt)),
            att=m._reg(f"dec{j}.att", init_cbam(rng, dj, r, dtype=dt)),
        ))
        up_width = dj

    d3 = cfg.decoder_channels[2]
    if cfg.task == "enhancement":
        m.out_conv = m._reg("out.conv", init_conv(rng, cin, d3, 3, dtype=dt))
    else:
        mid = cfg.sr_mid_width
        m.out_conv1 = m._reg("out.conv1", init_conv(rng, mid, d3, 3, dtype=dt))
        m.out_act = m._reg("out.act", init_prelu(mid, dtype=dt))
        m.out_conv2 = m._reg("out.conv2", init_conv(rng, cin, mid, 3, dtype=dt))
    return m
