# cython: boundscheck=False, wraparound=False, language_level=3
"""Cython bridge to the compiled 3x3 convolution kernels (CHWN float32)."""
import numpy as np

cimport numpy as cnp

cdef extern from "convkernels.h":
    void conv3x3_s1(const float *xp, const float *w, const float *b, float *y,
                    int ci, int co, int h, int wd, int n) nogil
    void conv3x3_s2(const float *xp, const float *w, const float *b, float *y,
                    int ci, int co, int h, int wd, int n, int ho, int wo) nogil
    void conv3x3_dw_s1(const float *xp, const float *gy, float *gw,
                       int ci, int co, int h, int wd, int n) nogil
    void conv3x3_dw_s2(const float *xp, const float *gy, float *gw,
                       int ci, int co, int h, int wd, int n, int ho, int wo) nogil


def conv3x3_fw(cnp.float32_t[:, :, :, ::1] xp, cnp.float32_t[:, :, :, ::1] w,
               cnp.float32_t[::1] b, int stride):
    """Padded input [ci, h+2, w+2, n] -> output [co, ho, wo, n]."""
    cdef int ci = xp.shape[0], h = xp.shape[1] - 2, wd = xp.shape[2] - 2
    cdef int n = xp.shape[3], co = w.shape[0]
    if w.shape[1] != ci or w.shape[2] != 3 or w.shape[3] != 3:
        raise ValueError("weight shape mismatch")
    if b.shape[0] != co:
        raise ValueError("bias shape mismatch")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    cdef int ho = (h - 1) // stride + 1
    cdef int wo = (wd - 1) // stride + 1
    y_arr = np.empty((co, ho, wo, n), dtype=np.float32)
    cdef cnp.float32_t[:, :, :, ::1] y = y_arr
    with nogil:
        if stride == 1:
            conv3x3_s1(&xp[0, 0, 0, 0], &w[0, 0, 0, 0], &b[0], &y[0, 0, 0, 0],
                       ci, co, h, wd, n)
        else:
            conv3x3_s2(&xp[0, 0, 0, 0], &w[0, 0, 0, 0], &b[0], &y[0, 0, 0, 0],
                       ci, co, h, wd, n, ho, wo)
    return y_arr


def conv3x3_dw(cnp.float32_t[:, :, :, ::1] xp, cnp.float32_t[:, :, :, ::1] gy,
               int stride):
    """Weight gradient [co, ci, 3, 3] from padded input and output gradient."""
    cdef int ci = xp.shape[0], h = xp.shape[1] - 2, wd = xp.shape[2] - 2
    cdef int n = xp.shape[3], co = gy.shape[0]
    cdef int ho = (h - 1) // stride + 1
    cdef int wo = (wd - 1) // stride + 1
    if gy.shape[1] != ho or gy.shape[2] != wo or gy.shape[3] != n:
        raise ValueError("gradient shape mismatch")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    gw_arr = np.empty((co, ci, 3, 3), dtype=np.float32)
    cdef cnp.float32_t[:, :, :, ::1] gw = gw_arr
    with nogil:
        if stride == 1:
            conv3x3_dw_s1(&xp[0, 0, 0, 0], &gy[0, 0, 0, 0], &gw[0, 0, 0, 0],
                          ci, co, h, wd, n)
        else:
            conv3x3_dw_s2(&xp[0, 0, 0, 0], &gy[0, 0, 0, 0], &gw[0, 0, 0, 0],
                          ci, co, h, wd, n, ho, wo)
    return gw_arr
