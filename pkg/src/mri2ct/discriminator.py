"""Patch discriminator combining 3-D conv filtering with a wavelet path.

The conv path is a stack of stride-2 convolutions (PatchGAN style); the
wavelet path first decomposes the volume into the 8 subbands of a
single-level orthonormal Haar analysis, which halves resolution and exposes
high-frequency structure directly.  Both paths meet at the same resolution,
are concatenated and reduced to a 1-channel map of patch realism logits (no
sigmoid; the losses work on logits).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

INV_SQRT2 = 1.0 / np.sqrt(2.0)

SUBBAND_ORDER = ("LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH")


@dataclass
class HaarSubbands:
    """Single-level 3-D Haar analysis; orthonormal (1/sqrt(2) per axis)."""

    bands: dict[str, Tensor]

    def __getitem__(self, name):
        return self.bands[name]

    def stacked(self):
        """Concatenate the 8 subbands along the channel axis (fixed order)."""
        return T.concat([self.bands[k] for k in SUBBAND_ORDER], axis=1)


def _haar_pair(x, axis):
    """Orthonormal Haar split along one spatial axis: (low, high)."""
    ev = _take_strided(x, axis, 0)
    od = _take_strided(x, axis, 1)
    low = T.mul_scalar(ev + od, INV_SQRT2)
    high = T.mul_scalar(ev - od, INV_SQRT2)
    return low, high


def _take_strided(x, axis, offset):
    """Every second sample along ``axis`` starting at ``offset`` (autodiff-safe)."""
    n = x.shape[axis]
    idx = np.arange(offset, n, 2)
    data = np.take(x.data, idx, axis=axis)
    out = T._out(np.ascontiguousarray(data), x)
    if out.requires_grad:
        def bwd(g):
            buf = np.zeros(x.shape, dtype=g.dtype)
            sl = [slice(None)] * x.ndim
            sl[axis] = slice(offset, n, 2)
            buf[tuple(sl)] = g
            T._acc(x, buf)
        T._push(out, bwd)
    return out


def pad_to_even(x, mode="replicate"):
    """Pad D,H,W up to even extents by mirroring the trailing sample
    (edge replication equals symmetric reflection for a 1-sample pad)."""
    pads = [(0, 0), (0, 0)] + [(0, e % 2) for e in x.shape[2:]]
    if any(hi for _, hi in pads):
        return T.pad(x, pads, mode=mode)
    return x


def haar3d(x):
    """Separable single-level Haar analysis of [B,C,D,H,W] per channel.

    Extents must be even (use :func:`pad_to_even` first).  Each subband has
    half extent per axis; a constant volume c yields LLL = c * 2*sqrt(2) and
    zero detail bands, and total energy is conserved.
    """
    if x.ndim != 5:
        raise ValueError("haar3d expects [B,C,D,H,W]")
    if any(e % 2 for e in x.shape[2:]):
        raise ValueError(f"extents {x.shape[2:]} must be even; pad first")
    ld, hd = _haar_pair(x, 2)
    bands = {}
    for dn, dpart in (("L", ld), ("H", hd)):
        lh, hh = _haar_pair(dpart, 3)
        for hn, hpart in (("L", lh), ("H", hh)):
            lw, hw = _haar_pair(hpart, 4)
            bands[dn + hn + "L"] = lw
            bands[dn + hn + "H"] = hw
    return HaarSubbands(bands={k: bands[k] for k in SUBBAND_ORDER})


def haar3d_inverse(sub):
    """Exact inverse of :func:`haar3d`."""
    def merge(low, high, axis):
        ev = T.mul_scalar(low + high, INV_SQRT2)
        od = T.mul_scalar(low - high, INV_SQRT2)
        return _interleave(ev, od, axis)

    planes = {}
    for dn in "LH":
        rows = {}
        for hn in "LH":
            rows[hn] = merge(sub[dn + hn + "L"], sub[dn + hn + "H"], 4)
        planes[dn] = merge(rows["L"], rows["H"], 3)
    return merge(planes["L"], planes["H"], 2)


def _interleave(ev, od, axis):
    n = ev.shape[axis]
    shape = list(ev.shape)
    shape[axis] = 2 * n
    data = np.zeros(shape, dtype=ev.dtype)
    sl_e = [slice(None)] * ev.ndim
    sl_o = [slice(None)] * ev.ndim
    sl_e[axis] = slice(0, 2 * n, 2)
    sl_o[axis] = slice(1, 2 * n, 2)
    data[tuple(sl_e)] = ev.data
    data[tuple(sl_o)] = od.data
    out = T._out(data, ev, od)
    if out.requires_grad:
        def bwd(g):
            T._acc(ev, np.ascontiguousarray(g[tuple(sl_e)]))
            T._acc(od, np.ascontiguousarray(g[tuple(sl_o)]))
        T._push(out, bwd)
    return out


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 1
    conv_widths: tuple[int, ...] = (16, 32, 64)
    wavelet_widths: tuple[int, ...] = (16, 32)
    fusion_width: int = 64
    leaky_slope: float = 0.2
    eps: float = 1e-5
    conditional: bool = False   # if set, forward takes [B,2,D,H,W] (MRI|CT)

    def __post_init__(self):
        if len(self.wavelet_widths) != len(self.conv_widths) - 1:
            raise ValueError("wavelet path needs exactly len(conv_widths)-1 stages")

    @property
    def total_stride(self):
        return 2 ** len(self.conv_widths)

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "conv_widths": list(self.conv_widths),
            "wavelet_widths": list(self.wavelet_widths),
            "fusion_width": self.fusion_width,
            "leaky_slope": self.leaky_slope,
            "eps": self.eps,
            "conditional": self.conditional,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("conv_widths", "wavelet_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DiscriminatorParams:
    conv_path: list          # [ConvP-like dicts of (w, b)] stride-2 stack
    conv_norms: list         # NormP for layers after the first
    wave_path: list
    wave_norms: list
    fuse_conv: tuple
    fuse_norm: tuple
    out_conv: tuple

    def named(self, prefix=""):
        for i, (w, b) in enumerate(self.conv_path):
            yield prefix + f"conv{i}.w", w
            yield prefix + f"conv{i}.b", b
        for i, (s, sh) in enumerate(self.conv_norms):
            yield prefix + f"convnorm{i}.scale", s
            yield prefix + f"convnorm{i}.shift", sh
        for i, (w, b) in enumerate(self.wave_path):
            yield prefix + f"wave{i}.w", w
            yield prefix + f"wave{i}.b", b
        for i, (s, sh) in enumerate(self.wave_norms):
            yield prefix + f"wavenorm{i}.scale", s
            yield prefix + f"wavenorm{i}.shift", sh
        yield prefix + "fuse.w", self.fuse_conv[0]
        yield prefix + "fuse.b", self.fuse_conv[1]
        yield prefix + "fusenorm.scale", self.fuse_norm[0]
        yield prefix + "fusenorm.shift", self.fuse_norm[1]
        yield prefix + "out.w", self.out_conv[0]
        yield prefix + "out.b", self.out_conv[1]

    def tensors(self):
        return [t for _, t in self.named()]


def _conv(rng, cout, cin, k, dtype, std=None):
    fan_in = cin * k ** 3
    std = np.sqrt(2.0 / fan_in) if std is None else std
    w = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k, k)).astype(dtype),
               requires_grad=True)
    b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return (w, b)


def _norm(c, dtype):
    return (Tensor(np.ones(c, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(c, dtype=dtype), requires_grad=True))


def init_discriminator(cfg, rng, dtype=np.float32):
    """Seeded init; the logit conv is near-zero so initial scores sit at
    BCE's ln(2) plateau."""
    cw = cfg.conv_widths
    conv_path = [_conv(rng, cw[0], cfg.in_channels, 3, dtype)]
    conv_norms = []
    for cin, cout in zip(cw, cw[1:]):
        conv_path.append(_conv(rng, cout, cin, 3, dtype))
        conv_norms.append(_norm(cout, dtype))
    ww = cfg.wavelet_widths
    wave_in = 8 * cfg.in_channels
    wave_path = []
    wave_norms = []
    prev = wave_in
    for i, wout in enumerate(ww):
        wave_path.append(_conv(rng, wout, prev, 3, dtype))
        if i > 0:
            wave_norms.append(_norm(wout, dtype))
        prev = wout
    fused_in = cw[-1] + (ww[-1] if ww else wave_in)
    fuse_conv = _conv(rng, cfg.fusion_width, fused_in, 3, dtype)
    fuse_norm = _norm(cfg.fusion_width, dtype)
    out_conv = _conv(rng, 1, cfg.fusion_width, 3, dtype, std=0.01)
    return DiscriminatorParams(conv_path, conv_norms, wave_path, wave_norms,
                               fuse_conv, fuse_norm, out_conv)


def logit_extent(ext, levels):
    """Output extent after ``levels`` halvings: iterated ceil(e/2)."""
    for _ in range(levels):
        ext = (ext + 1) // 2
    return ext


def discriminator_forward(x, params, cfg):
    """Volume [B,Cin,D,H,W] -> patch logit map [B,1,d,h,w].

    Each stride-2 layer maps extent e -> ceil(e/2), so the logit map extent
    is ceil(e / 2^len(conv_widths)) per axis."""
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected [B,{cfg.in_channels},D,H,W], got {x.shape}")
    n = len(cfg.conv_widths)
    final = [logit_extent(e, n) for e in x.shape[2:]]
    if min(final) < 2:
        raise ValueError(
            f"input extents {x.shape[2:]} too small: the {n}-level stack reduces "
            f"them to {tuple(final)} and the fusion norm needs >= 2 voxels")

    # conv path: stride-2 stack, no norm on the first layer
    h = x
    for i, (w, b) in enumerate(params.conv_path):
        h = T.conv3d(h, w, b, stride=2, padding=1)
        if i > 0:
            s, sh = params.conv_norms[i - 1]
            h = T.instance_norm(h, s, sh, cfg.eps)
        h = T.leaky_relu(h, cfg.leaky_slope)

    # wavelet path: haar halves resolution once, convs do the rest
    wv = haar3d(pad_to_even(x)).stacked()
    for i, (w, b) in enumerate(params.wave_path):
        wv = T.conv3d(wv, w, b, stride=2, padding=1)
        if i > 0:
            s, sh = params.wave_norms[i - 1]
            wv = T.instance_norm(wv, s, sh, cfg.eps)
        wv = T.leaky_relu(wv, cfg.leaky_slope)

    if h.shape[2:] != wv.shape[2:]:
        raise ValueError(
            f"path resolutions diverged: conv {h.shape[2:]} vs wavelet {wv.shape[2:]}")
    z = T.concat([h, wv], axis=1)
    z = T.conv3d(z, params.fuse_conv[0], params.fuse_conv[1], padding=1)
    z = T.instance_norm(z, params.fuse_norm[0], params.fuse_norm[1], cfg.eps)
    z = T.leaky_relu(z, cfg.leaky_slope)
    return T.conv3d(z, params.out_conv[0], params.out_conv[1], padding=1)
