"""3-D shifted-window multi-head self-attention blocks.

A block is the standard pre-norm composition
``x + Attn(LN(x))`` followed by ``x + MLP(LN(x))``, where the attention is
evaluated independently inside non-overlapping 3-D windows.  Alternating
blocks cyclically roll the volume by half a window so information crosses
window boundaries; an additive mask keeps tokens that wrapped around the
torus from attending to each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_NEG = -1e9


@dataclass(frozen=True)
class WindowSpec:
    """Window geometry; each shift component is 0 or half the window extent."""

    window: tuple[int, int, int]
    shift: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if len(self.window) != 3 or len(self.shift) != 3:
            raise ValueError("window and shift must be 3-tuples")
        if min(self.window) < 1:
            raise ValueError("window extents must be positive")
        for w, s in zip(self.window, self.shift):
            if s not in (0, w // 2):
                raise ValueError(f"shift {s} must be 0 or {w // 2} for window extent {w}")

    @property
    def tokens(self):
        wd, wh, ww = self.window
        return wd * wh * ww

    @property
    def shifted(self):
        return any(s > 0 for s in self.shift)


def _check_divisible(extents, window):
    for e, w in zip(extents, window):
        if e % w:
            raise ValueError(f"extent {e} not divisible by window {w}")


def window_partition(x, spec):
    """[B,C,D,H,W] -> [B*nWindows, tokens, C]; windows ordered row-major over
    the window grid, tokens row-major inside each window."""
    b, c, d, h, w = x.shape
    wd, wh, ww = spec.window
    _check_divisible((d, h, w), spec.window)
    nd, nh, nw = d // wd, h // wh, w // ww
    y = T.reshape(x, (b, c, nd, wd, nh, wh, nw, ww))
    y = T.permute(y, (0, 2, 4, 6, 3, 5, 7, 1))
    return T.reshape(y, (b * nd * nh * nw, wd * wh * ww, c))


def window_reverse(wins, spec, batch, extents):
    """Inverse of :func:`window_partition`."""
    d, h, w = extents
    wd, wh, ww = spec.window
    nd, nh, nw = d // wd, h // wh, w // ww
    c = wins.shape[-1]
    y = T.reshape(wins, (batch, nd, nh, nw, wd, wh, ww, c))
    y = T.permute(y, (0, 7, 1, 4, 2, 5, 3, 6))
    return T.reshape(y, (batch, c, d, h, w))


def cyclic_shift(x, spec, inverse=False):
    """Torus roll by -shift (forward) or +shift (inverse) over D,H,W."""
    if not spec.shifted:
        return x
    sd, sh, sw = spec.shift
    sign = 1 if inverse else -1
    return T.roll(x, (sign * sd, sign * sh, sign * sw), (2, 3, 4))


_mask_cache = {}


def attention_mask(spec, extents):
    """Additive mask [nWindows, tokens, tokens] for shifted-window attention.

    Entries are 0 where both tokens come from the same pre-shift region and
    MASK_NEG otherwise.  Calling this with a zero shift is a contract error:
    unshifted windows need no mask.  Masks are pure functions of the
    geometry and are cached.
    """
    if not spec.shifted:
        raise ValueError("attention_mask is only defined for nonzero shifts")
    d, h, w = extents
    _check_divisible(extents, spec.window)
    key = (spec.window, spec.shift, tuple(extents))
    cached = _mask_cache.get(key)
    if cached is None:
        labels = np.zeros((d, h, w), dtype=np.float64)
        region = 0
        for ds in _axis_regions(d, spec.window[0], spec.shift[0]):
            for hs in _axis_regions(h, spec.window[1], spec.shift[1]):
                for ws in _axis_regions(w, spec.window[2], spec.shift[2]):
                    labels[ds, hs, ws] = region
                    region += 1
        lab = Tensor(labels.reshape(1, 1, d, h, w))
        with T.no_grad():
            lw = window_partition(lab, spec).data[:, :, 0]
        same = lw[:, :, None] == lw[:, None, :]
        cached = np.where(same, 0.0, MASK_NEG).astype(np.float32)
        _mask_cache[key] = cached
    return Tensor(cached)


def _axis_regions(ext, w, s):
    if s == 0:
        return [slice(0, ext)]
    return [slice(0, ext - w), slice(ext - w, ext - s), slice(ext - s, ext)]


@dataclass
class SwinBlockParams:
    """Learnable state of one window-attention block."""

    heads: int
    norm1_scale: Tensor
    norm1_shift: Tensor
    qkv_w: Tensor          # [C, 3C]
    qkv_b: Tensor          # [3C]
    proj_w: Tensor         # [C, C]
    proj_b: Tensor         # [C]
    norm2_scale: Tensor
    norm2_shift: Tensor
    mlp_w1: Tensor         # [C, mlp_ratio*C]
    mlp_b1: Tensor
    mlp_w2: Tensor         # [mlp_ratio*C, C]
    mlp_b2: Tensor
    rpb_table: Tensor      # [heads, (2wd-1)(2wh-1)(2ww-1)]
    rpb_index: np.ndarray = field(repr=False)  # [tokens*tokens] int64

    @property
    def channels(self):
        return self.norm1_scale.shape[0]

    def named(self, prefix=""):
        for name in ("norm1_scale", "norm1_shift", "qkv_w", "qkv_b", "proj_w",
                     "proj_b", "norm2_scale", "norm2_shift", "mlp_w1", "mlp_b1",
                     "mlp_w2", "mlp_b2", "rpb_table"):
            yield prefix + name, getattr(self, name)


def relative_position_index(window):
    """Token-pair -> bias-table index map, a pure function of the geometry.

    Mirrored pairs (i, j)/(j, i) land on mirrored 3-D offsets."""
    wd, wh, ww = window
    coords = np.stack(np.meshgrid(np.arange(wd), np.arange(wh), np.arange(ww),
                                  indexing="ij"), axis=0).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + np.array([wd - 1, wh - 1, ww - 1]).reshape(3, 1, 1)
    idx = (rel[0] * (2 * wh - 1) + rel[1]) * (2 * ww - 1) + rel[2]
    return idx.reshape(-1).astype(np.int64)


def init_swin_block(channels, heads, window, rng, mlp_ratio=4, dtype=np.float32):
    """Seeded initialization; attention/MLP weights are clipped normals
    (sigma 0.02), norms are identity, and the bias table starts at zero so a
    fresh block maps spatially constant fields to constant fields exactly."""
    if channels % heads:
        raise ValueError(f"heads {heads} must divide channels {channels}")
    wd, wh, ww = window
    table_size = (2 * wd - 1) * (2 * wh - 1) * (2 * ww - 1)

    def tn(*shape):
        v = rng.normal(0.0, 0.02, size=shape)
        return Tensor(np.clip(v, -0.04, 0.04).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    hidden = mlp_ratio * channels
    return SwinBlockParams(
        heads=heads,
        norm1_scale=ones(channels), norm1_shift=zeros(channels),
        qkv_w=tn(channels, 3 * channels), qkv_b=zeros(3 * channels),
        proj_w=tn(channels, channels), proj_b=zeros(channels),
        norm2_scale=ones(channels), norm2_shift=zeros(channels),
        mlp_w1=tn(channels, hidden), mlp_b1=zeros(hidden),
        mlp_w2=tn(hidden, channels), mlp_b2=zeros(channels),
        rpb_table=zeros(heads, table_size),
        rpb_index=relative_position_index(window),
    )


def _window_attention(tokens, params, n_windows, mask):
    """Dense attention inside each window; tokens is [B*nW, T, C]."""
    bw, t, c = tokens.shape
    heads = params.heads
    hd = c // heads

    qkv = T.matmul(T.reshape(tokens, (bw * t, c)), params.qkv_w) + params.qkv_b
    qkv = T.reshape(qkv, (bw, t, 3, heads, hd))
    qkv = T.permute(qkv, (2, 0, 3, 1, 4))          # [3, Bw, heads, T, hd]
    q = T.reshape(T.narrow(qkv, 0, 0, 1), (bw, heads, t, hd))
    k = T.reshape(T.narrow(qkv, 0, 1, 1), (bw, heads, t, hd))
    v = T.reshape(T.narrow(qkv, 0, 2, 1), (bw, heads, t, hd))

    attn = T.matmul(T.mul_scalar(q, 1.0 / np.sqrt(hd)), T.permute(k, (0, 1, 3, 2)))
    bias = T.reshape(T.gather_last(params.rpb_table, params.rpb_index), (heads, t, t))
    attn = attn + bias
    if mask is not None:
        b = bw // n_windows
        attn = T.reshape(attn, (b, n_windows, heads, t, t))
        attn = attn + T.reshape(mask, (1, n_windows, 1, t, t))
        attn = T.reshape(attn, (bw, heads, t, t))
    attn = T.softmax_lastdim(attn)

    out = T.matmul(attn, v)                        # [Bw, heads, T, hd]
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (bw * t, c))
    out = T.matmul(out, params.proj_w) + params.proj_b
    return T.reshape(out, (bw, t, c))


def swin_block(x, params, spec, pad_mode="zeros"):
    """One window-attention block over [B,C,D,H,W]; shape preserving.

    Extents not divisible by the window are padded (then cropped back); the
    pad mode is configurable because the generator needs replicate padding to
    keep constant fields exactly constant.
    """
    b, c, d, h, w = x.shape
    if c != params.channels:
        raise ValueError(f"channel mismatch: input {c} vs params {params.channels}")
    wd, wh, ww = spec.window
    pd, ph, pw = (-d) % wd, (-h) % wh, (-w) % ww
    if pd or ph or pw:
        x_in = T.pad(x, ((0, 0), (0, 0), (0, pd), (0, ph), (0, pw)), mode=pad_mode)
    else:
        x_in = x
    dp, hp, wp = d + pd, h + ph, w + pw
    n_windows = (dp // wd) * (hp // wh) * (wp // ww)

    mask = attention_mask(spec, (dp, hp, wp)) if spec.shifted else None
    if mask is not None and mask.dtype != x.dtype:
        mask = Tensor(mask.data.astype(x.dtype))

    # attention sub-layer (pre-norm, residual)
    hseq = T.permute(x_in, (0, 2, 3, 4, 1))        # channels-last [B,D,H,W,C]
    normed = T.layer_norm(hseq, params.norm1_scale, params.norm1_shift)
    shifted = cyclic_shift(T.permute(normed, (0, 4, 1, 2, 3)), spec)
    tokens = window_partition(shifted, spec)
    attended = _window_attention(tokens, params, n_windows, mask)
    merged = window_reverse(attended, spec, b, (dp, hp, wp))
    merged = cyclic_shift(merged, spec, inverse=True)
    hseq = hseq + T.permute(merged, (0, 2, 3, 4, 1))

    # MLP sub-layer
    normed = T.layer_norm(hseq, params.norm2_scale, params.norm2_shift)
    flat = T.reshape(normed, (b * dp * hp * wp, c))
    z = T.relu(T.matmul(flat, params.mlp_w1) + params.mlp_b1)
    z = T.matmul(z, params.mlp_w2) + params.mlp_b2
    hseq = hseq + T.reshape(z, (b, dp, hp, wp, c))

    y = T.permute(hseq, (0, 4, 1, 2, 3))
    if pd or ph or pw:
        y = T.crop(y, ((0, b), (0, c), (0, d), (0, h), (0, w)))
    return y
