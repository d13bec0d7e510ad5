# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] xp, real[:, :, ::1] cols, int kh, int kw, int sh, int sw, int oh, int ow):
    cdef Py_ssize_t n, c, i, j, y, x, row
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef real* src
    cdef real* dst
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for y in range(oh):
                            src = &xp[n, c, y * sh + i, j]
                            dst = &cols[n, row, y * ow]
                            if sw == 1:
                                memcpy(dst, src, ow * sizeof(real))
                            else:
                                for x in range(ow):
                                    dst[x] = src[x * sw]


def _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] out, int kh, int kw, int sh, int sw, int oh, int ow):
    cdef Py_ssize_t n, c, i, j, y, x, row
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1]
    cdef real* src
    cdef real* dst
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for y in range(oh):
                            src = &cols[n, row, y * ow]
                            dst = &out[n, c, y * sh + i, j]
                            for x in range(ow):
                                dst[x * sw] += src[x]


def _maxpool_forward(real[:, :, :, ::1] xp, real[:, :, :, ::1] out, int[:, :, :, ::1] arg, int k, int s):
    cdef Py_ssize_t n, c, y, x, i, j
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], OH = out.shape[2], OW = out.shape[3]
    cdef real best, v
    cdef int besti
    with nogil:
        for n in range(N):
            for c in range(C):
                for y in range(OH):
                    for x in range(OW):
                        best = xp[n, c, y * s, x * s]
                        besti = 0
                        for i in range(k):
                            for j in range(k):
                                v = xp[n, c, y * s + i, x * s + j]
                                if v > best:
                                    best = v
                                    besti = i * k + j
                        out[n, c, y, x] = best
                        arg[n, c, y, x] = besti


def _maxpool_backward(real[:, :, :, ::1] g, int[:, :, :, ::1] arg, real[:, :, :, ::1] out, int k, int s):
    cdef Py_ssize_t n, c, y, x
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], OH = g.shape[2], OW = g.shape[3]
    cdef int a
    with nogil:
        for n in range(N):
            for c in range(C):
                for y in range(OH):
                    for x in range(OW):
                        a = arg[n, c, y, x]
                        out[n, c, y * s + a // k, x * s + a % k] += g[n, c, y, x]


def im2col(xp, int kh, int kw, int sh, int sw, int oh, int ow):
    xp = np.ascontiguousarray(xp)
    cols = np.empty((xp.shape[0], xp.shape[1] * kh * kw, oh * ow), dtype=xp.dtype)
    _im2col(xp, cols, kh, kw, sh, sw, oh, ow)
    return cols


def col2im(cols, int c, int hp, int wp, int kh, int kw, int sh, int sw, int oh, int ow):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], c, hp, wp), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, sh, sw, oh, ow)
    return out


def maxpool_forward(xp, int k, int s, int oh, int ow):
    xp = np.ascontiguousarray(xp)
    out = np.empty((xp.shape[0], xp.shape[1], oh, ow), dtype=xp.dtype)
    arg = np.empty((xp.shape[0], xp.shape[1], oh, ow), dtype=np.int32)
    _maxpool_forward(xp, out, arg, k, s)
    return out, arg


def maxpool_backward(g, arg, int hp, int wp, int k, int s):
    g = np.ascontiguousarray(g)
    arg = np.ascontiguousarray(arg, dtype=np.int32)
    out = np.zeros((g.shape[0], g.shape[1], hp, wp), dtype=g.dtype)
    _maxpool_backward(g, arg, out, k, s)
    return out
