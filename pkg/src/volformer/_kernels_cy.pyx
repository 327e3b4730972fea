# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3D convolution kernels (direct loops, fixed accumulation order).

Same contract as ``_kernels_py``: inputs are pre-padded, channels-first,
C-contiguous float32 or float64 arrays.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def conv3d_forward(floating[:, :, :, ::1] xp, floating[:, :, :, :, ::1] w, tuple stride):
    cdef Py_ssize_t c_out = w.shape[0], c_in = w.shape[1]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3], kd = w.shape[4]
    cdef Py_ssize_t s0 = stride[0], s1 = stride[1], s2 = stride[2]
    cdef Py_ssize_t ho = (xp.shape[1] - kh) // s0 + 1
    cdef Py_ssize_t wo = (xp.shape[2] - kw) // s1 + 1
    cdef Py_ssize_t do = (xp.shape[3] - kd) // s2 + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((c_out, ho, wo, do), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t co, ci, i, j, a, b, c, l
    cdef floating wv
    cdef floating* orow
    cdef floating* xrow
    with nogil:
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    orow = &out[co, i, j, 0]
                    for ci in range(c_in):
                        for a in range(kh):
                            for b in range(kw):
                                xrow = &xp[ci, i * s0 + a, j * s1 + b, 0]
                                for c in range(kd):
                                    wv = w[co, ci, a, b, c]
                                    if s2 == 1:
                                        for l in range(do):
                                            orow[l] += wv * xrow[l + c]
                                    else:
                                        for l in range(do):
                                            orow[l] += wv * xrow[l * s2 + c]
    return out_arr


def conv3d_backward_input(floating[:, :, :, ::1] gout, floating[:, :, :, :, ::1] w,
                          tuple stride, tuple xp_shape):
    cdef Py_ssize_t c_out = w.shape[0], c_in = w.shape[1]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3], kd = w.shape[4]
    cdef Py_ssize_t s0 = stride[0], s1 = stride[1], s2 = stride[2]
    cdef Py_ssize_t ho = gout.shape[1], wo = gout.shape[2], do = gout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gxp_arr = np.zeros(xp_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] gxp = gxp_arr
    cdef Py_ssize_t co, ci, i, j, a, b, c, l
    cdef floating wv
    cdef floating* grow
    cdef floating* xrow
    with nogil:
        for ci in range(c_in):
            for i in range(ho):
                for j in range(wo):
                    for a in range(kh):
                        for b in range(kw):
                            xrow = &gxp[ci, i * s0 + a, j * s1 + b, 0]
                            for co in range(c_out):
                                grow = &gout[co, i, j, 0]
                                for c in range(kd):
                                    wv = w[co, ci, a, b, c]
                                    if s2 == 1:
                                        for l in range(do):
                                            xrow[l + c] += wv * grow[l]
                                    else:
                                        for l in range(do):
                                            xrow[l * s2 + c] += wv * grow[l]
    return gxp_arr


def conv3d_backward_weight(floating[:, :, :, ::1] xp, floating[:, :, :, ::1] gout,
                           tuple kernel, tuple stride):
    cdef Py_ssize_t c_out = gout.shape[0], c_in = xp.shape[0]
    cdef Py_ssize_t kh = kernel[0], kw = kernel[1], kd = kernel[2]
    cdef Py_ssize_t s0 = stride[0], s1 = stride[1], s2 = stride[2]
    cdef Py_ssize_t ho = gout.shape[1], wo = gout.shape[2], do = gout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gw_arr = np.zeros((c_out, c_in, kh, kw, kd), dtype=dtype)
    # per-lane partial sums, reduced over the last axis in order at the end
    partial_arr = np.zeros((kh, kw, kd, do), dtype=dtype)
    cdef floating[:, :, :, :, ::1] gw = gw_arr
    cdef floating[:, :, :, ::1] partial = partial_arr
    cdef Py_ssize_t co, ci, i, j, a, b, c, l
    cdef floating acc
    cdef floating* grow
    cdef floating* xrow
    cdef floating* prow
    with nogil:
        for co in range(c_out):
            for ci in range(c_in):
                partial[:, :, :, :] = 0
                for i in range(ho):
                    for j in range(wo):
                        grow = &gout[co, i, j, 0]
                        for a in range(kh):
                            for b in range(kw):
                                xrow = &xp[ci, i * s0 + a, j * s1 + b, 0]
                                for c in range(kd):
                                    prow = &partial[a, b, c, 0]
                                    if s2 == 1:
                                        for l in range(do):
                                            prow[l] += grow[l] * xrow[l + c]
                                    else:
                                        for l in range(do):
                                            prow[l] += grow[l] * xrow[l * s2 + c]
                for a in range(kh):
                    for b in range(kw):
                        for c in range(kd):
                            acc = 0
                            for l in range(do):
                                acc = acc + partial[a, b, c, l]
                            gw[co, ci, a, b, c] = acc
    return gw_arr
