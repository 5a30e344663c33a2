"""Pure-numpy 3D convolution kernels (fallback backend).

All three entry points share the contract of the compiled backend
(`_convcore`): inputs are C-contiguous float32 or float64 arrays that have
already been padded by the caller, and the convolution is a *valid*
cross-correlation with per-axis stride and dilation.

The forward and weight-gradient paths gather sliding windows with stride
tricks and reduce them with a single BLAS contraction; the input gradient
is expressed as another valid correlation (stride-inserted output gradient
against the spatially flipped, channel-swapped kernel) so no scatter-add is
needed.
"""

import numpy as np


def out_extent(ext, k, stride, dilation):
    return (ext - dilation * (k - 1) - 1) // stride + 1


def _windows(xp, kshape, stride, dilation):
    b, ci, dp, hp, wp = xp.shape
    kd, kh, kw = kshape
    sd, sh, sw = stride
    dd, dh, dw = dilation
    do = out_extent(dp, kd, sd, dd)
    ho = out_extent(hp, kh, sh, dh)
    wo = out_extent(wp, kw, sw, dw)
    if min(do, ho, wo) < 1:
        raise ValueError(
            f"non-positive output extent for input {xp.shape[2:]}, "
            f"kernel {kshape}, stride {stride}, dilation {dilation}"
        )
    eb, ec, ed, eh, ew = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, ci, kd, kh, kw, do, ho, wo),
        strides=(eb, ec, ed * dd, eh * dh, ew * dw, ed * sd, eh * sh, ew * sw),
        writeable=False,
    )


def conv3d_fwd(xp, w, stride, dilation):
    """Valid correlation of padded input [B,Ci,D,H,W] with kernel [Co,Ci,kd,kh,kw]."""
    win = _windows(xp, w.shape[2:], stride, dilation)
    y = np.tensordot(w, win, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3, 4))


def conv3d_gw(gy, xp, kshape, stride, dilation):
    """Kernel gradient: correlate padded input windows with the output gradient."""
    win = _windows(xp, kshape, stride, dilation)
    gw = np.tensordot(gy, win, axes=([0, 2, 3, 4], [0, 5, 6, 7]))
    return np.ascontiguousarray(gw)


def conv3d_gx(gy, w, xp_shape, stride, dilation):
    """Gradient w.r.t. the padded input, returned with shape `xp_shape`.

    Per kernel offset (i,j,l): contract gy with w[:, :, i, j, l] over the
    output channel and scatter-add onto the strided input slice.  For a
    fixed offset the destination voxels are distinct, so each add is one
    vectorized strided-slice update and the loop order is deterministic.
    """
    b, co, do, ho, wo = gy.shape
    _, ci, kd, kh, kw = w.shape
    sd, sh, sw = stride
    dd, dh, dw = dilation

    gx = np.zeros((b, ci) + tuple(xp_shape[2:]), dtype=gy.dtype)
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                t = np.tensordot(w[:, :, i, j, l], gy, axes=([0], [1]))
                gx[:, :,
                   i * dd:i * dd + (do - 1) * sd + 1:sd,
                   j * dh:j * dh + (ho - 1) * sh + 1:sh,
                   l * dw:l * dw + (wo - 1) * sw + 1:sw] += t.transpose(1, 0, 2, 3, 4)
    return gx
