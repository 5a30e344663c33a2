"""Independent reference implementations used as test oracles.

Everything here is deliberately brute force (explicit loops, direct
formulas) and never calls the code paths it checks.
"""

import numpy as np


def naive_conv3d(x, w, b=None, stride=1, dilation=1, padding=0):
    """Direct septuple-loop 3-D cross-correlation with zero padding."""
    stride = (stride,) * 3 if np.isscalar(stride) else tuple(stride)
    dilation = (dilation,) * 3 if np.isscalar(dilation) else tuple(dilation)
    padding = (padding,) * 3 if np.isscalar(padding) else tuple(padding)
    B, Ci, D, H, W = x.shape
    Co, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    sd, sh, sw = stride
    dd, dh, dw = dilation
    Do = (xp.shape[2] - dd * (kd - 1) - 1) // sd + 1
    Ho = (xp.shape[3] - dh * (kh - 1) - 1) // sh + 1
    Wo = (xp.shape[4] - dw * (kw - 1) - 1) // sw + 1
    y = np.zeros((B, Co, Do, Ho, Wo), dtype=np.float64)
    for bb in range(B):
        for co in range(Co):
            for od in range(Do):
                for oh in range(Ho):
                    for ow in range(Wo):
                        acc = 0.0
                        for ci in range(Ci):
                            for i in range(kd):
                                for j in range(kh):
                                    for l in range(kw):
                                        acc += (xp[bb, ci, od * sd + i * dd,
                                                   oh * sh + j * dh, ow * sw + l * dw]
                                                * w[co, ci, i, j, l])
                        y[bb, co, od, oh, ow] = acc + (0.0 if b is None else b[co])
    return y


def naive_window_attention(tokens, qkv_w, qkv_b, proj_w, proj_b, heads,
                           bias_table, bias_index, mask=None):
    """Dense per-window attention on [nW, T, C] tokens (post-layernorm)."""
    nw, t, c = tokens.shape
    hd = c // heads
    out = np.zeros_like(tokens)
    bias = bias_table[:, bias_index].reshape(heads, t, t)
    for wi in range(nw):
        qkv = tokens[wi] @ qkv_w + qkv_b        # [T, 3C]
        q = qkv[:, :c].reshape(t, heads, hd).transpose(1, 0, 2)
        k = qkv[:, c:2 * c].reshape(t, heads, hd).transpose(1, 0, 2)
        v = qkv[:, 2 * c:].reshape(t, heads, hd).transpose(1, 0, 2)
        merged = np.zeros((t, c))
        for h in range(heads):
            logits = (q[h] / np.sqrt(hd)) @ k[h].T + bias[h]
            if mask is not None:
                logits = logits + mask[wi]
            logits = logits - logits.max(axis=-1, keepdims=True)
            weights = np.exp(logits)
            weights /= weights.sum(axis=-1, keepdims=True)
            merged[:, h * hd:(h + 1) * hd] = weights @ v[h]
        out[wi] = merged @ proj_w + proj_b
    return out


def naive_ssim(x, y, mask, window=7, k1=0.01, k2=0.03, data_range=4024.0):
    """Loop-per-window SSIM over in-mask, fully supported centers."""
    r = window // 2
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    D, H, W = x.shape
    for d in range(r, D - r):
        for h in range(r, H - r):
            for w in range(r, W - r):
                if mask[d, h, w] <= 0.5:
                    continue
                wx = x[d - r:d + r + 1, h - r:h + r + 1, w - r:w + r + 1].astype(np.float64)
                wy = y[d - r:d + r + 1, h - r:h + r + 1, w - r:w + r + 1].astype(np.float64)
                mx, my = wx.mean(), wy.mean()
                vx, vy = wx.var(), wy.var()
                cov = ((wx - mx) * (wy - my)).mean()
                num = (2 * mx * my + c1) * (2 * cov + c2)
                den = (mx * mx + my * my + c1) * (vx + vy + c2)
                vals.append(num / den)
    return float(np.mean(vals))


def finite_diff(loss_fn, arrays, indices=None, h=1e-3):
    """Central finite differences of a scalar ``loss_fn()`` w.r.t. entries of
    the given float64 numpy arrays (mutated in place and restored).

    ``indices`` maps array position -> flat indices to probe (all if None).
    Returns a list of (array_pos, flat_index, derivative).
    """
    grads = []
    for pos, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        idx = range(flat.size) if indices is None else indices[pos]
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn()
            flat[i] = keep - h
            down = loss_fn()
            flat[i] = keep
            grads.append((pos, i, (up - down) / (2.0 * h)))
    return grads


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
