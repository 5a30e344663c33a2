"""Minimal N-D tensor engine with reverse-mode automatic differentiation.

Design:

* ``Tensor`` wraps a float32 (training) or float64 (gradient-check) numpy
  array plus an optional same-shape gradient accumulator.  5-D data uses the
  fixed axis order [batch, channel, depth, height, width].
* Differentiable ops append closures to a process-global tape in execution
  order.  ``backward(loss)`` walks the tape strictly in reverse, accumulates
  ``d(loss)/d(input)`` into every tracked tensor it reaches, and consumes the
  tape; a second backward without a fresh forward raises.
* Tensors are treated as immutable once produced.  Parameter updates swap in
  new arrays (see ``optim``), they never mutate tracked data in place.

Convolutions dispatch to the active hot-kernel backend (compiled extension
or numpy fallback, see ``mri2ct.kernels``).  Everything here is
single-threaded and deterministic: same inputs, same bits out.
"""

from __future__ import annotations

import numpy as np

from . import kernels

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-D float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul_scalar(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)


# --- tape ------------------------------------------------------------------

_tape = []
_grad_enabled = True
_nan_checks = False


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_nan_checks(flag):
    """Toggle the finite-output check on every forward op (slow; for tests)."""
    global _nan_checks
    _nan_checks = bool(flag)


def tape_size():
    return len(_tape)


def clear_tape():
    _tape.clear()


def _tracked(*inputs):
    return _grad_enabled and any(t.requires_grad for t in inputs)


def _out(data, *inputs):
    if _nan_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    return Tensor(data, requires_grad=_tracked(*inputs))


def _push(out_tensor, backward_fn):
    _tape.append((out_tensor, backward_fn))


def _acc(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _acc_new(t, g):
    """Like _acc for gradients the caller freshly allocated and does not
    alias anywhere else; skips the defensive copy."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def backward(loss):
    """Populate gradients of every tracked ancestor of the scalar ``loss``.

    Consumes the tape: ops recorded since the last backward are visited in
    exact reverse execution order and then discarded.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("backward requires a scalar Tensor loss")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad (no_grad or untracked inputs)")
    if not _tape:
        raise RuntimeError("tape is empty: second backward without a new forward pass")
    loss.grad = np.ones_like(loss.data)
    for out_t, fn in reversed(_tape):
        if out_t.grad is not None:
            fn(out_t.grad)
    _tape.clear()


# --- helpers ---------------------------------------------------------------


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError("per-axis parameter needs exactly 3 entries")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


# --- elementwise and linear ops --------------------------------------------


def add(a, b):
    b = _as_tensor(b, a) if isinstance(a, Tensor) else b
    a = _as_tensor(a, b)
    out = _out(a.data + b.data, a, b)
    if out.requires_grad:
        def bwd(g):
            _acc(a, _unbroadcast(g, a.shape))
            _acc(b, _unbroadcast(g, b.shape))
        _push(out, bwd)
    return out


def sub(a, b):
    b = _as_tensor(b, a)
    out = _out(a.data - b.data, a, b)
    if out.requires_grad:
        def bwd(g):
            _acc(a, _unbroadcast(g, a.shape))
            _acc(b, _unbroadcast(-g, b.shape))
        _push(out, bwd)
    return out


def mul(a, b):
    if not isinstance(b, Tensor):
        return mul_scalar(a, float(b))
    out = _out(a.data * b.data, a, b)
    if out.requires_grad:
        def bwd(g):
            _acc_new(a, _unbroadcast(g * b.data, a.shape))
            _acc_new(b, _unbroadcast(g * a.data, b.shape))
        _push(out, bwd)
    return out


def mul_scalar(a, s):
    s = a.dtype.type(s)
    out = _out(a.data * s, a)
    if out.requires_grad:
        def bwd(g):
            _acc_new(a, g * s)
        _push(out, bwd)
    return out


def relu(x):
    out = _out(np.maximum(x.data, 0), x)
    if out.requires_grad:
        mask = x.data > 0
        def bwd(g):
            _acc_new(x, g * mask)
        _push(out, bwd)
    return out


def leaky_relu(x, slope=0.2):
    slope = x.dtype.type(slope)
    out = _out(np.where(x.data > 0, x.data, x.data * slope), x)
    if out.requires_grad:
        mask = x.data > 0
        def bwd(g):
            _acc_new(x, np.where(mask, g, g * slope))
        _push(out, bwd)
    return out


def tanh(x):
    y = np.tanh(x.data)
    out = _out(y, x)
    if out.requires_grad:
        def bwd(g):
            _acc_new(x, g * (1.0 - y * y))
        _push(out, bwd)
    return out


def abs_(x):
    out = _out(np.abs(x.data), x)
    if out.requires_grad:
        sign = np.sign(x.data)
        def bwd(g):
            _acc_new(x, g * sign)
        _push(out, bwd)
    return out


def softplus(x):
    """log(1 + exp(x)) in the overflow-safe form max(x,0) + log1p(exp(-|x|))."""
    y = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))
    out = _out(y, x)
    if out.requires_grad:
        e = np.exp(-np.abs(x.data))
        sig = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        def bwd(g):
            _acc_new(x, g * sig)
        _push(out, bwd)
    return out


def matmul(a, b):
    """Stacked matrix product: (..., n, k) @ (k, m) or (..., n, k) @ (..., k, m)."""
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    out = _out(a.data @ b.data, a, b)
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                _acc_new(a, g @ b.data.swapaxes(-1, -2))
            if b.requires_grad:
                if b.ndim == 2:
                    n, k = a.shape[-2], a.shape[-1]
                    m = g.shape[-1]
                    _acc_new(b, a.data.reshape(-1, k).T @ g.reshape(-1, m))
                else:
                    _acc_new(b, a.data.swapaxes(-1, -2) @ g)
        _push(out, bwd)
    return out


def sum_all(x):
    out = _out(np.asarray(x.data.sum(), dtype=x.dtype), x)
    if out.requires_grad:
        def bwd(g):
            _acc_new(x, np.broadcast_to(g, x.shape).copy())
        _push(out, bwd)
    return out


def mean_all(x):
    inv = x.dtype.type(1.0 / x.size)
    out = _out(np.asarray(x.data.mean(), dtype=x.dtype), x)
    if out.requires_grad:
        def bwd(g):
            _acc_new(x, np.broadcast_to(g * inv, x.shape).copy())
        _push(out, bwd)
    return out


# --- shape ops ---------------------------------------------------------------


def reshape(x, shape):
    out = _out(x.data.reshape(shape), x)
    if out.requires_grad:
        def bwd(g):
            _acc(x, g.reshape(x.shape))
        _push(out, bwd)
    return out


def permute(x, axes):
    axes = tuple(axes)
    out = _out(np.ascontiguousarray(x.data.transpose(axes)), x)
    if out.requires_grad:
        inv = np.argsort(axes)
        def bwd(g):
            _acc(x, np.ascontiguousarray(g.transpose(inv)))
        _push(out, bwd)
    return out


def roll(x, shifts, axes):
    shifts = tuple(shifts)
    axes = tuple(axes)
    out = _out(np.roll(x.data, shifts, axis=axes), x)
    if out.requires_grad:
        back = tuple(-s for s in shifts)
        def bwd(g):
            _acc(x, np.roll(g, back, axis=axes))
        _push(out, bwd)
    return out


def concat(tensors, axis):
    out = _out(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    if out.requires_grad:
        splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
        def bwd(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                _acc(t, piece)
        _push(out, bwd)
    return out


def pad(x, pads, mode="zeros"):
    """Pad with per-axis (lo, hi) amounts; mode is "zeros" or "replicate"."""
    pads = tuple((int(lo), int(hi)) for lo, hi in pads)
    if len(pads) != x.ndim:
        raise ValueError("pad spec must cover every axis")
    np_mode = {"zeros": "constant", "replicate": "edge"}[mode]
    out = _out(np.pad(x.data, pads, mode=np_mode), x)
    if out.requires_grad:
        def bwd(g):
            if mode == "replicate":
                g = _fold_edges(g, pads)
            core = tuple(slice(lo, lo + e) for (lo, _), e in zip(pads, x.shape))
            _acc(x, np.ascontiguousarray(g[core]))
        _push(out, bwd)
    return out


def _fold_edges(g, pads):
    """Fold replicate-pad gradients back onto the edge samples."""
    g = g.copy()
    for ax, (lo, hi) in enumerate(pads):
        if lo:
            idx = [slice(None)] * g.ndim
            strip = list(idx)
            strip[ax] = slice(0, lo)
            idx[ax] = slice(lo, lo + 1)
            g[tuple(idx)] += g[tuple(strip)].sum(axis=ax, keepdims=True)
        if hi:
            n = g.shape[ax]
            idx = [slice(None)] * g.ndim
            strip = list(idx)
            strip[ax] = slice(n - hi, n)
            idx[ax] = slice(n - hi - 1, n - hi)
            g[tuple(idx)] += g[tuple(strip)].sum(axis=ax, keepdims=True)
    return g


def crop(x, bounds):
    """Slice with per-axis (start, stop); gradient zero-embeds back."""
    bounds = tuple((int(a), int(b)) for a, b in bounds)
    sl = tuple(slice(a, b) for a, b in bounds)
    out = _out(np.ascontiguousarray(x.data[sl]), x)
    if out.requires_grad:
        def bwd(g):
            buf = np.zeros(x.shape, dtype=g.dtype)
            buf[sl] = g
            _acc_new(x, buf)
        _push(out, bwd)
    return out


def narrow(x, axis, start, length):
    bounds = [(0, e) for e in x.shape]
    bounds[axis] = (start, start + length)
    return crop(x, bounds)


def gather_last(table, index):
    """Index the last axis of ``table`` with an integer array; used for the
    relative-position bias lookup.  Gradient scatter-adds over duplicates."""
    idx = np.asarray(index)
    out = _out(np.ascontiguousarray(table.data[..., idx]), table)
    if out.requires_grad:
        lead = table.shape[:-1]
        def bwd(g):
            buf = np.zeros(table.shape, dtype=g.dtype)
            flat = g.reshape(lead + (idx.size,))
            np.add.at(buf, (..., idx.ravel()), flat)
            _acc(table, buf)
        _push(out, bwd)
    return out


# --- normalization and softmax ----------------------------------------------


def instance_norm(x, scale, shift, eps=1e-5):
    """Per-(batch, channel) normalization over the spatial volume of a 5-D map."""
    if x.ndim != 5:
        raise ValueError("instance_norm expects [B,C,D,H,W]")
    b, c, d, h, w = x.shape
    n = d * h * w
    if n < 2:
        raise ValueError("instance_norm needs a spatial volume of at least 2 voxels")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError("scale/shift must have shape [C]")
    red = (2, 3, 4)
    mu = x.data.mean(axis=red, keepdims=True)
    var = x.data.var(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = _out(xhat * scale.data.reshape(1, c, 1, 1, 1) + shift.data.reshape(1, c, 1, 1, 1),
               x, scale, shift)
    if out.requires_grad:
        def bwd(g):
            if shift.requires_grad:
                _acc_new(shift, g.sum(axis=(0, 2, 3, 4)))
            if scale.requires_grad:
                _acc_new(scale, (g * xhat).sum(axis=(0, 2, 3, 4)))
            if x.requires_grad:
                gs = g * scale.data.reshape(1, c, 1, 1, 1)
                m1 = gs.mean(axis=red, keepdims=True)
                m2 = (gs * xhat).mean(axis=red, keepdims=True)
                _acc_new(x, inv * (gs - m1 - xhat * m2))
        _push(out, bwd)
    return out


def layer_norm(x, scale, shift, eps=1e-5):
    """Normalization over the last axis; scale/shift shaped like that axis."""
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError("scale/shift must match the last axis extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = _out(xhat * scale.data + shift.data, x, scale, shift)
    if out.requires_grad:
        def bwd(g):
            if shift.requires_grad:
                red = tuple(range(g.ndim - 1))
                _acc_new(shift, g.sum(axis=red))
            if scale.requires_grad:
                red = tuple(range(g.ndim - 1))
                _acc_new(scale, (g * xhat).sum(axis=red))
            if x.requires_grad:
                gs = g * scale.data
                m1 = gs.mean(axis=-1, keepdims=True)
                m2 = (gs * xhat).mean(axis=-1, keepdims=True)
                _acc_new(x, inv * (gs - m1 - xhat * m2))
        _push(out, bwd)
    return out


def softmax_lastdim(x):
    """Row-stable softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _out(y, x)
    if out.requires_grad:
        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _acc_new(x, y * (g - dot))
        _push(out, bwd)
    return out


# --- convolution -------------------------------------------------------------


def conv3d(x, weight, bias=None, stride=1, dilation=1, padding=0, pad_mode="zeros"):
    """3-D cross-correlation over [B,Cin,D,H,W] with kernel [Cout,Cin,k,k,k].

    ``stride``/``dilation``/``padding`` accept an int (applied per axis) or a
    3-tuple.  Output extent per axis is
    (E + 2*padding - dilation*(k-1) - 1) // stride + 1.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError("conv3d expects 5-D input and kernel")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs kernel {weight.shape[1]}")
    if any(k % 2 == 0 for k in weight.shape[2:]):
        raise ValueError("kernel extents must be odd")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError("bias must have shape [Cout]")
    stride = _triple(stride)
    dilation = _triple(dilation)
    padding = _triple(padding)
    if min(dilation) < 1 or min(stride) < 1:
        raise ValueError("stride and dilation must be >= 1")

    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    np_mode = {"zeros": "constant", "replicate": "edge"}[pad_mode]
    xp = np.pad(x.data, pads, mode=np_mode) if max(padding) else x.data
    for ext, k, s, dil in zip(xp.shape[2:], weight.shape[2:], stride, dilation):
        if (ext - dil * (k - 1) - 1) // s + 1 < 1:
            raise ValueError(
                f"non-positive output extent: input {x.shape[2:]} padded {xp.shape[2:]}, "
                f"kernel {weight.shape[2:]}, stride {stride}, dilation {dilation}")

    y = kernels.conv3d_fwd(xp, weight.data, stride, dilation)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1, 1)
        out = _out(y, x, weight, bias)
    else:
        out = _out(y, x, weight)
    if out.requires_grad:
        xp_saved = xp if x.requires_grad or weight.requires_grad else None
        def bwd(g):
            g = np.ascontiguousarray(g)
            if bias is not None and bias.requires_grad:
                _acc_new(bias, g.sum(axis=(0, 2, 3, 4)))
            if weight.requires_grad:
                _acc_new(weight, kernels.conv3d_gw(g, xp_saved, weight.shape[2:], stride, dilation))
            if x.requires_grad:
                gxp = kernels.conv3d_gx(g, weight.data, xp_saved.shape, stride, dilation)
                if max(padding):
                    if pad_mode == "replicate":
                        gxp = _fold_edges(gxp, pads)
                    core = tuple(slice(lo, lo + e) for (lo, _), e in zip(pads, x.shape))
                    gxp = np.ascontiguousarray(gxp[core])
                _acc_new(x, gxp)
        _push(out, bwd)
    return out


# --- trilinear upsampling ----------------------------------------------------


def _upsample_axis_maps(ext, factor):
    """Align-corners-false source indices and fractions for one axis."""
    o = np.arange(ext * factor, dtype=np.float64)
    src = (o + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, ext - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, ext - 1)
    i1 = np.minimum(i0 + 1, ext - 1)
    t = src - i0
    return i0, i1, t


def _interp_axis(arr, axis, i0, i1, t):
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(t)
    tt = t.astype(arr.dtype).reshape(shape)
    # a + t*(b - a): exact on constant fields (b - a == 0 bitwise)
    return a + tt * (b - a)


def _interp_axis_transpose(g, axis, i0, i1, t, in_ext):
    shape = [1] * g.ndim
    shape[axis] = len(t)
    tt = t.astype(g.dtype).reshape(shape)
    g0 = np.moveaxis(g * (1.0 - tt).astype(g.dtype), axis, 0)
    g1 = np.moveaxis(g * tt, axis, 0)
    buf = np.zeros((in_ext,) + g0.shape[1:], dtype=g.dtype)
    np.add.at(buf, i0, g0)
    np.add.at(buf, i1, g1)
    return np.moveaxis(buf, 0, axis)


def trilinear_upsample(x, factor):
    """Integer-factor trilinear upsampling of [B,C,D,H,W], align-corners-false.

    Convention (fixed): output sample o reads source coordinate
    (o + 0.5)/factor - 0.5, clamped to the valid range; a 2-sample axis
    [v0, v1] upsampled by 2 therefore yields [v0, 0.75*v0+0.25*v1,
    0.25*v0+0.75*v1, v1] (evaluated in the difference form a + t*(b-a)).
    """
    if x.ndim != 5:
        raise ValueError("trilinear_upsample expects [B,C,D,H,W]")
    factor = int(factor)
    if factor < 2:
        raise ValueError("upsampling factor must be >= 2")
    maps = [_upsample_axis_maps(x.shape[ax], factor) for ax in (2, 3, 4)]
    y = x.data
    for ax, (i0, i1, t) in zip((2, 3, 4), maps):
        y = _interp_axis(y, ax, i0, i1, t)
    out = _out(np.ascontiguousarray(y), x)
    if out.requires_grad:
        def bwd(g):
            for ax, (i0, i1, t) in reversed(list(zip((2, 3, 4), maps))):
                g = _interp_axis_transpose(g, ax, i0, i1, t, x.shape[ax])
            _acc_new(x, np.ascontiguousarray(g))
        _push(out, bwd)
    return out
