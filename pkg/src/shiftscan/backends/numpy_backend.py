"""Pure-numpy fallback for the 3x3 convolution kernels.

Same contract as the compiled module: activations are CHWN, inputs are
zero-padded by one pixel, weights are [co, ci, 3, 3].  Works for float32
and float64 (the float64 path backs the finite-difference gradient checks).
"""
import numpy as np


def _im2col(xp, stride):
    ci, hp, wp, n = xp.shape
    h, wd = hp - 2, wp - 2
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    cols = np.empty((ci, 3, 3, ho, wo, n), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i:i + (ho - 1) * stride + 1:stride,
                               j:j + (wo - 1) * stride + 1:stride, :]
    return cols, ho, wo


def conv3x3_fw(xp, w, b, stride):
    ci, _, _, n = xp.shape
    co = w.shape[0]
    cols, ho, wo = _im2col(xp, stride)
    y = w.reshape(co, ci * 9) @ cols.reshape(ci * 9, ho * wo * n)
    y += b[:, None]
    return np.ascontiguousarray(y.reshape(co, ho, wo, n))


def conv3x3_dw(xp, gy, stride):
    ci = xp.shape[0]
    co = gy.shape[0]
    cols, ho, wo = _im2col(xp, stride)
    gw = gy.reshape(co, ho * wo * gy.shape[3]) @ cols.reshape(ci * 9, -1).T
    return np.ascontiguousarray(gw.reshape(co, ci, 3, 3))
