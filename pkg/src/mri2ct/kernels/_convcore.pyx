# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3D convolution kernels.

Same contract as the numpy fallback (`conv_py`): pre-padded C-contiguous
inputs, valid cross-correlation, per-axis stride and dilation.  Loops keep a
fixed accumulation order so results are reproducible run to run; the
innermost loop runs along the contiguous W axis, with a dedicated unit-stride
branch the compiler can vectorize.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def out_extent(Py_ssize_t ext, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t dilation):
    return (ext - dilation * (k - 1) - 1) // stride + 1


def conv3d_fwd(floating[:, :, :, :, ::1] xp, floating[:, :, :, :, ::1] w,
               stride, dilation):
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t dd = dilation[0], dh = dilation[1], dw = dilation[2]
    cdef Py_ssize_t b = xp.shape[0], ci = xp.shape[1]
    cdef Py_ssize_t dp = xp.shape[2], hp = xp.shape[3], wp = xp.shape[4]
    cdef Py_ssize_t co = w.shape[0], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t do = (dp - dd * (kd - 1) - 1) // sd + 1
    cdef Py_ssize_t ho = (hp - dh * (kh - 1) - 1) // sh + 1
    cdef Py_ssize_t wo = (wp - dw * (kw - 1) - 1) // sw + 1
    if do < 1 or ho < 1 or wo < 1:
        raise ValueError("non-positive output extent")

    dtype = np.float32 if floating is float else np.float64
    y_arr = np.zeros((b, co, do, ho, wo), dtype=dtype)
    cdef floating[:, :, :, :, ::1] y = y_arr
    cdef Py_ssize_t ib, ic, io, i, j, l, od, oh, ow
    cdef floating wv
    cdef const floating* xrow
    cdef const floating* wrow
    cdef floating* yrow

    # one x-row sweep covers all kw taps: the row setup amortizes over the
    # kernel's W extent and the unit-stride branch vectorizes
    for ib in range(b):
        for io in range(co):
            for od in range(do):
                for oh in range(ho):
                    yrow = &y[ib, io, od, oh, 0]
                    for ic in range(ci):
                        for i in range(kd):
                            for j in range(kh):
                                xrow = &xp[ib, ic, od * sd + i * dd, oh * sh + j * dh, 0]
                                wrow = &w[io, ic, i, j, 0]
                                for l in range(kw):
                                    wv = wrow[l]
                                    if wv == 0:
                                        continue
                                    if sw == 1:
                                        for ow in range(wo):
                                            yrow[ow] += wv * xrow[ow + l * dw]
                                    else:
                                        for ow in range(wo):
                                            yrow[ow] += wv * xrow[ow * sw + l * dw]
    return y_arr


def conv3d_gw(floating[:, :, :, :, ::1] gy, floating[:, :, :, :, ::1] xp,
              kshape, stride, dilation):
    cdef Py_ssize_t kd = kshape[0], kh = kshape[1], kw = kshape[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t dd = dilation[0], dh = dilation[1], dw = dilation[2]
    cdef Py_ssize_t b = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t do = gy.shape[2], ho = gy.shape[3], wo = gy.shape[4]
    cdef Py_ssize_t ci = xp.shape[1]

    dtype = np.float32 if floating is float else np.float64
    gw_arr = np.zeros((co, ci, kd, kh, kw), dtype=dtype)
    cdef floating[:, :, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t ib, ic, io, i, j, l, od, oh, ow
    cdef floating acc
    cdef const floating* xrow
    cdef const floating* grow
    cdef floating* gwrow

    for io in range(co):
        for ic in range(ci):
            for i in range(kd):
                for j in range(kh):
                    gwrow = &gw[io, ic, i, j, 0]
                    for ib in range(b):
                        for od in range(do):
                            for oh in range(ho):
                                xrow = &xp[ib, ic, od * sd + i * dd, oh * sh + j * dh, 0]
                                grow = &gy[ib, io, od, oh, 0]
                                for l in range(kw):
                                    acc = 0
                                    if sw == 1:
                                        for ow in range(wo):
                                            acc += grow[ow] * xrow[ow + l * dw]
                                    else:
                                        for ow in range(wo):
                                            acc += grow[ow] * xrow[ow * sw + l * dw]
                                    gwrow[l] += acc
    return gw_arr


def conv3d_gx(floating[:, :, :, :, ::1] gy, floating[:, :, :, :, ::1] w,
              xp_shape, stride, dilation):
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t dd = dilation[0], dh = dilation[1], dw = dilation[2]
    cdef Py_ssize_t b = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t do = gy.shape[2], ho = gy.shape[3], wo = gy.shape[4]
    cdef Py_ssize_t ci = w.shape[1], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4]
    cdef Py_ssize_t dp = xp_shape[2], hp = xp_shape[3], wp = xp_shape[4]

    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((b, ci, dp, hp, wp), dtype=dtype)
    cdef floating[:, :, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t ib, ic, io, i, j, l, od, oh, ow
    cdef floating wv
    cdef floating* xrow
    cdef const floating* wrow
    cdef const floating* grow

    for ib in range(b):
        for ic in range(ci):
            for io in range(co):
                for od in range(do):
                    for oh in range(ho):
                        grow = &gy[ib, io, od, oh, 0]
                        for i in range(kd):
                            for j in range(kh):
                                xrow = &gx[ib, ic, od * sd + i * dd, oh * sh + j * dh, 0]
                                wrow = &w[io, ic, i, j, 0]
                                for l in range(kw):
                                    wv = wrow[l]
                                    if wv == 0:
                                        continue
                                    if sw == 1:
                                        for ow in range(wo):
                                            xrow[ow + l * dw] += wv * grow[ow]
                                    else:
                                        for ow in range(wo):
                                            xrow[ow * sw + l * dw] += wv * grow[ow]
    return gx_arr
