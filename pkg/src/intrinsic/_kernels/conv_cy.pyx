# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels.

Same contracts as the numpy backend: float64 NCHW arrays, inputs
already padded by the caller, weights laid out (O, C, kh, kw). Inner
loops run over contiguous output rows so the compiler can vectorize
the stride-1 case, which is what the network mostly uses.
"""

import numpy as np


def conv2d_forward(double[:, :, :, ::1] xp, double[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    out_arr = np.zeros((n, o, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bn, bo, bc, ki, kj, y, x
    cdef double wv
    cdef double* xrow
    cdef double* orow
    for bn in range(n):
        for bc in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    for bo in range(o):
                        wv = w[bo, bc, ki, kj]
                        for y in range(ho):
                            xrow = &xp[bn, bc, y * stride + ki, kj]
                            orow = &out[bn, bo, y, 0]
                            if stride == 1:
                                for x in range(wo):
                                    orow[x] += wv * xrow[x]
                            else:
                                for x in range(wo):
                                    orow[x] += wv * xrow[x * stride]
    return out_arr


def conv2d_grad_weight(double[:, :, :, ::1] gy, double[:, :, :, ::1] xp,
                       int stride, int kh, int kw):
    cdef Py_ssize_t n = gy.shape[0], o = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = xp.shape[1]
    gw_arr = np.zeros((o, c, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t bn, bo, bc, ki, kj, y, x
    cdef double acc
    cdef double* grow
    cdef double* xrow
    for bn in range(n):
        for bo in range(o):
            for bc in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        acc = 0.0
                        for y in range(ho):
                            grow = &gy[bn, bo, y, 0]
                            xrow = &xp[bn, bc, y * stride + ki, kj]
                            if stride == 1:
                                for x in range(wo):
                                    acc += grow[x] * xrow[x]
                            else:
                                for x in range(wo):
                                    acc += grow[x] * xrow[x * stride]
                        gw[bo, bc, ki, kj] += acc
    return gw_arr


def conv2d_grad_input_padded(double[:, :, :, ::1] gy, double[:, :, :, ::1] w,
                             int stride, int hp, int wp):
    cdef Py_ssize_t n = gy.shape[0], o = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    gx_arr = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bn, bo, bc, ki, kj, y, x
    cdef double wv
    cdef double* grow
    cdef double* gxrow
    for bn in range(n):
        for bo in range(o):
            for bc in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[bo, bc, ki, kj]
                        for y in range(ho):
                            grow = &gy[bn, bo, y, 0]
                            gxrow = &gx[bn, bc, y * stride + ki, kj]
                            if stride == 1:
                                for x in range(wo):
                                    gxrow[x] += wv * grow[x]
                            else:
                                for x in range(wo):
                                    gxrow[x * stride] += wv * grow[x]
    return gx_arr
