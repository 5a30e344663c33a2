"""Volumetric MRI-to-CT generator.

Encoder stages pair a local convolutional stream with a parallel
window-attention branch fed through dilated convolutions; the two are fused
by channel concatenation, a 1x1x1 projection and a residual onto the conv
stream:

    f = Conv1x1x1([f_conv, f_attn]) + f_conv

The bottleneck repeats the parallel design on the deepest features, and the
decoder mirrors the encoder with trilinear upsampling, skip concatenation
and a tanh head producing values in (-1, 1).

All spatial convolutions use replicate padding and the attention branch a
zero relative-position bias at init, so a freshly initialized generator maps
spatially constant inputs to spatially constant outputs bit-exactly; the
sliding-window inference tests rely on this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .swin import SwinBlockParams, WindowSpec, init_swin_block, swin_block
from .tensor import Tensor


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    out_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64)
    stage_heads: tuple[int, ...] = (2, 4, 4)
    window: tuple[int, int, int] = (4, 4, 4)
    swin_depth: int = 2
    dilations: tuple[int, ...] = (1, 2)
    mlp_ratio: int = 4
    eps: float = 1e-5
    pad_mode: str = "replicate"

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_heads):
            raise ValueError("stage_channels and stage_heads must align")
        if not self.stage_channels:
            raise ValueError("need at least one encoder stage")
        if any(a > b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("stage channels must be non-decreasing")
        for c, h in zip(self.stage_channels, self.stage_heads):
            if c % h:
                raise ValueError(f"heads {h} must divide channels {c}")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be >= 1")
        if self.swin_depth < 1:
            raise ValueError("swin_depth must be >= 1")

    @property
    def stages(self):
        return len(self.stage_channels)

    @property
    def spatial_divisor(self):
        return 2 ** (self.stages - 1)

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "stage_channels": list(self.stage_channels),
            "stage_heads": list(self.stage_heads),
            "window": list(self.window),
            "swin_depth": self.swin_depth,
            "dilations": list(self.dilations),
            "mlp_ratio": self.mlp_ratio,
            "eps": self.eps,
            "pad_mode": self.pad_mode,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("stage_channels", "stage_heads", "window", "dilations"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ConvP:
    w: Tensor
    b: Tensor

    def named(self, prefix=""):
        yield prefix + "w", self.w
        yield prefix + "b", self.b


@dataclass
class NormP:
    scale: Tensor
    shift: Tensor

    def named(self, prefix=""):
        yield prefix + "scale", self.scale
        yield prefix + "shift", self.shift


@dataclass
class StageParams:
    conv1: ConvP
    in1: NormP
    conv2: ConvP
    in2: NormP
    dil_convs: list[ConvP]
    blocks: list[SwinBlockParams]
    fuse: ConvP

    def named(self, prefix=""):
        yield from self.conv1.named(prefix + "conv1.")
        yield from self.in1.named(prefix + "in1.")
        yield from self.conv2.named(prefix + "conv2.")
        yield from self.in2.named(prefix + "in2.")
        for i, cp in enumerate(self.dil_convs):
            yield from cp.named(prefix + f"dil{i}.")
        for i, bp in enumerate(self.blocks):
            yield from bp.named(prefix + f"block{i}.")
        yield from self.fuse.named(prefix + "fuse.")


@dataclass
class BottleneckParams:
    dil_convs: list[ConvP]
    blocks: list[SwinBlockParams]
    fuse: ConvP

    def named(self, prefix=""):
        for i, cp in enumerate(self.dil_convs):
            yield from cp.named(prefix + f"dil{i}.")
        for i, bp in enumerate(self.blocks):
            yield from bp.named(prefix + f"block{i}.")
        yield from self.fuse.named(prefix + "fuse.")


@dataclass
class DecoderLevelParams:
    conv1: ConvP
    in1: NormP
    conv2: ConvP
    in2: NormP

    def named(self, prefix=""):
        yield from self.conv1.named(prefix + "conv1.")
        yield from self.in1.named(prefix + "in1.")
        yield from self.conv2.named(prefix + "conv2.")
        yield from self.in2.named(prefix + "in2.")


@dataclass
class GeneratorParams:
    stem: ConvP
    stages: list[StageParams]
    downs: list[ConvP]
    bottleneck: BottleneckParams
    decoder: list[DecoderLevelParams]
    head: ConvP

    def named(self, prefix=""):
        yield from self.stem.named(prefix + "stem.")
        for i, sp in enumerate(self.stages):
            yield from sp.named(prefix + f"stage{i}.")
        for i, cp in enumerate(self.downs):
            yield from cp.named(prefix + f"down{i}.")
        yield from self.bottleneck.named(prefix + "bottleneck.")
        for i, dp in enumerate(self.decoder):
            yield from dp.named(prefix + f"dec{i}.")
        yield from self.head.named(prefix + "head.")

    def tensors(self):
        return [t for _, t in self.named()]


@dataclass
class StageFeatures:
    """Per-stage conv-stream, attention-branch and fused feature maps."""

    f_c: Tensor
    f_t: Tensor
    f: Tensor


def _conv_init(rng, cout, cin, k, dtype, std=None):
    fan_in = cin * k ** 3
    std = np.sqrt(2.0 / fan_in) if std is None else std
    w = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k, k)).astype(dtype),
               requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return ConvP(w, b)


def _conv_zero(cout, cin, k, dtype):
    w = Tensor(np.zeros((cout, cin, k, k, k), dtype=dtype), requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return ConvP(w, b)


def _norm_init(c, dtype):
    return NormP(Tensor(np.ones(c, dtype=dtype), requires_grad=True),
                 Tensor(np.zeros(c, dtype=dtype), requires_grad=True))


def init_generator(cfg, rng, dtype=np.float32):
    """Seeded parameter construction.

    Conv weights use fan-in scaling, attention/MLP weights clipped normals,
    and every fusion projection starts at zero so training begins from the
    pure conv path (and the transformer branch is exactly ablatable).
    """
    ch = cfg.stage_channels
    stem = _conv_init(rng, ch[0], cfg.in_channels, 3, dtype)
    stages = []
    for ell, (c, heads) in enumerate(zip(ch, cfg.stage_heads)):
        blocks = [init_swin_block(c, heads, cfg.window, rng, cfg.mlp_ratio, dtype)
                  for _ in range(cfg.swin_depth)]
        stages.append(StageParams(
            conv1=_conv_init(rng, c, c, 3, dtype),
            in1=_norm_init(c, dtype),
            conv2=_conv_init(rng, c, c, 3, dtype),
            in2=_norm_init(c, dtype),
            dil_convs=[_conv_init(rng, c, c, 3, dtype) for _ in cfg.dilations],
            blocks=blocks,
            fuse=_conv_zero(c, 2 * c, 1, dtype),
        ))
    downs = [_conv_init(rng, ch[i + 1], ch[i], 3, dtype) for i in range(cfg.stages - 1)]
    cb = ch[-1]
    bottleneck = BottleneckParams(
        dil_convs=[_conv_init(rng, cb, cb, 3, dtype) for _ in cfg.dilations],
        blocks=[init_swin_block(cb, cfg.stage_heads[-1], cfg.window, rng,
                                cfg.mlp_ratio, dtype) for _ in cfg.dilations],
        fuse=_conv_zero(cb, 2 * cb, 1, dtype),
    )
    decoder = []
    prev = cb
    for c in reversed(ch[:-1]):
        decoder.append(DecoderLevelParams(
            conv1=_conv_init(rng, c, prev + c, 3, dtype),
            in1=_norm_init(c, dtype),
            conv2=_conv_init(rng, c, c, 3, dtype),
            in2=_norm_init(c, dtype),
        ))
        prev = c
    head = _conv_init(rng, cfg.out_channels, ch[0], 1, dtype, std=0.02)
    return GeneratorParams(stem=stem, stages=stages, downs=downs,
                           bottleneck=bottleneck, decoder=decoder, head=head)


def _block_spec(cfg, index):
    """Alternate plain and shifted windows: even blocks W-MSA, odd SW-MSA."""
    if index % 2 == 0:
        return WindowSpec(cfg.window)
    return WindowSpec(cfg.window, tuple(w // 2 for w in cfg.window))


def fuse_features(f_c, f_t, proj, pad_mode="replicate"):
    """Channel-concat fusion with residual projection onto the conv stream."""
    if f_c.shape != f_t.shape:
        raise ValueError(f"fusion inputs differ: {f_c.shape} vs {f_t.shape}")
    cat = T.concat([f_c, f_t], axis=1)
    return T.conv3d(cat, proj.w, proj.b, padding=0, pad_mode=pad_mode) + f_c


def _swin_stack(x, blocks, cfg, alternate_from=0):
    for i, bp in enumerate(blocks):
        x = swin_block(x, bp, _block_spec(cfg, alternate_from + i), pad_mode=cfg.pad_mode)
    return x


def encoder_stage(x, sp, cfg):
    """One encoder stage: conv stream, dilated attention branch, fusion."""
    f_c = T.relu(T.instance_norm(
        T.conv3d(x, sp.conv1.w, sp.conv1.b, padding=1, pad_mode=cfg.pad_mode),
        sp.in1.scale, sp.in1.shift, cfg.eps))
    f_c = T.relu(T.instance_norm(
        T.conv3d(f_c, sp.conv2.w, sp.conv2.b, padding=1, pad_mode=cfg.pad_mode),
        sp.in2.scale, sp.in2.shift, cfg.eps))
    f_t = None
    for d, cp in zip(cfg.dilations, sp.dil_convs):
        branch = T.conv3d(x, cp.w, cp.b, dilation=d, padding=d, pad_mode=cfg.pad_mode)
        branch = _swin_stack(branch, sp.blocks, cfg)
        f_t = branch if f_t is None else f_t + branch
    f = fuse_features(f_c, f_t, sp.fuse, cfg.pad_mode)
    return StageFeatures(f_c=f_c, f_t=f_t, f=f)


def bottleneck(x, bp, cfg):
    """Parallel dilated attention paths fused residually onto the input."""
    f_t = None
    for i, (d, cp) in enumerate(zip(cfg.dilations, bp.dil_convs)):
        path = T.conv3d(x, cp.w, cp.b, dilation=d, padding=d, pad_mode=cfg.pad_mode)
        path = swin_block(path, bp.blocks[i], _block_spec(cfg, i), pad_mode=cfg.pad_mode)
        f_t = path if f_t is None else f_t + path
    return fuse_features(x, f_t, bp.fuse, cfg.pad_mode)


def decoder_and_head(z, skips, params, cfg):
    """Upsample, concat skip, double conv per level; 1x1x1 tanh head."""
    for dp, sf in zip(params.decoder, skips):
        z = T.trilinear_upsample(z, 2)
        if z.shape[2:] != sf.f.shape[2:]:
            raise ValueError(f"skip extents {sf.f.shape[2:]} do not match {z.shape[2:]}")
        z = T.concat([z, sf.f], axis=1)
        z = T.relu(T.instance_norm(
            T.conv3d(z, dp.conv1.w, dp.conv1.b, padding=1, pad_mode=cfg.pad_mode),
            dp.in1.scale, dp.in1.shift, cfg.eps))
        z = T.relu(T.instance_norm(
            T.conv3d(z, dp.conv2.w, dp.conv2.b, padding=1, pad_mode=cfg.pad_mode),
            dp.in2.scale, dp.in2.shift, cfg.eps))
    return T.tanh(T.conv3d(z, params.head.w, params.head.b, padding=0))


def generator_forward(mri, params, cfg):
    """Full forward pass [B,1,D,H,W] -> [B,1,D,H,W], values in (-1, 1)."""
    if mri.ndim != 5 or mri.shape[1] != cfg.in_channels:
        raise ValueError(f"expected [B,{cfg.in_channels},D,H,W], got {mri.shape}")
    div = cfg.spatial_divisor
    bad = {ax: (-e) % div for ax, e in zip("DHW", mri.shape[2:]) if e % div}
    if bad:
        need = ", ".join(f"{ax}+{p}" for ax, p in bad.items())
        raise ValueError(
            f"spatial extents {mri.shape[2:]} must be divisible by {div}; pad {need}")

    x = T.conv3d(mri, params.stem.w, params.stem.b, padding=1, pad_mode=cfg.pad_mode)
    feats = []
    for ell, sp in enumerate(params.stages):
        sf = encoder_stage(x, sp, cfg)
        feats.append(sf)
        if ell < cfg.stages - 1:
            dn = params.downs[ell]
            x = T.conv3d(sf.f, dn.w, dn.b, stride=2, padding=1, pad_mode=cfg.pad_mode)
    z = bottleneck(feats[-1].f, params.bottleneck, cfg)
    skips = feats[:-1][::-1]
    return decoder_and_head(z, skips, params, cfg)


def param_count(params):
    return int(sum(t.size for _, t in params.named()))


def transformer_branch_tensors(params):
    """Every tensor that can only influence the output through a fusion
    projection: the dilated convs, all attention blocks, in stages and
    bottleneck alike."""
    out = []
    for sp in params.stages:
        for cp in sp.dil_convs:
            out += [cp.w, cp.b]
        for bp in sp.blocks:
            out += [t for _, t in bp.named()]
    for cp in params.bottleneck.dil_convs:
        out += [cp.w, cp.b]
    for bp in params.bottleneck.blocks:
        out += [t for _, t in bp.named()]
    return out
