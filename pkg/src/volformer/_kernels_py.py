"""Pure-numpy 3D convolution kernels.

Each kernel works on an already zero-padded input and is written as one
small GEMM per kernel offset, so memory stays at the size of the operands.
"""

import itertools

import numpy as np


def _out_dims(in_dims, kernel, stride):
    return tuple((n - k) // s + 1 for n, k, s in zip(in_dims, kernel, stride))


def _window(xp, offset, out_dims, stride):
    return xp[
        :,
        offset[0] : offset[0] + stride[0] * (out_dims[0] - 1) + 1 : stride[0],
        offset[1] : offset[1] + stride[1] * (out_dims[1] - 1) + 1 : stride[1],
        offset[2] : offset[2] + stride[2] * (out_dims[2] - 1) + 1 : stride[2],
    ]


def conv3d_forward(xp, w, stride):
    c_out, c_in = w.shape[:2]
    kernel = w.shape[2:]
    out_dims = _out_dims(xp.shape[1:], kernel, stride)
    out = np.zeros((c_out, int(np.prod(out_dims))), dtype=xp.dtype)
    for offset in itertools.product(*(range(k) for k in kernel)):
        cols = _window(xp, offset, out_dims, stride).reshape(c_in, -1)
        out += w[(slice(None), slice(None)) + offset] @ cols
    return out.reshape((c_out,) + out_dims)


def conv3d_backward_input(gout, w, stride, xp_shape):
    c_out, c_in = w.shape[:2]
    kernel = w.shape[2:]
    out_dims = gout.shape[1:]
    g2 = gout.reshape(c_out, -1)
    gxp = np.zeros(xp_shape, dtype=gout.dtype)
    for offset in itertools.product(*(range(k) for k in kernel)):
        contrib = (w[(slice(None), slice(None)) + offset].T @ g2).reshape((c_in,) + out_dims)
        _window(gxp, offset, out_dims, stride)[...] += contrib
    return gxp


def conv3d_backward_weight(xp, gout, kernel, stride):
    c_out = gout.shape[0]
    c_in = xp.shape[0]
    out_dims = gout.shape[1:]
    g2 = gout.reshape(c_out, -1)
    gw = np.zeros((c_out, c_in) + tuple(kernel), dtype=gout.dtype)
    for offset in itertools.product(*(range(k) for k in kernel)):
        cols = _window(xp, offset, out_dims, stride).reshape(c_in, -1)
        gw[(slice(None), slice(None)) + offset] = g2 @ cols.T
    return gw
