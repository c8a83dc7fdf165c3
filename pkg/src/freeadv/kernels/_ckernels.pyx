# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and pooling kernels (see _pykernels for semantics)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _dtype(const real[:, :, :, ::1] x):
    return np.float32 if real is float else np.float64


def im2col(const real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1, ow = (w - kw) // stride + 1
    cdef Py_ssize_t b, p, q, ch, i, j, row, col
    out = np.empty((n * oh * ow, c * kh * kw), dtype=_dtype(x))
    cdef real[:, ::1] cols = out
    with nogil:
        for b in range(n):
            for p in range(oh):
                for q in range(ow):
                    row = (b * oh + p) * ow + q
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[row, col] = x[b, ch, p * stride + i, q * stride + j]
                                col += 1
    return out


def col2im(const real[:, ::1] cols, tuple x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1, ow = (w - kw) // stride + 1
    cdef Py_ssize_t b, p, q, ch, i, j, row, col
    out = np.zeros((n, c, h, w), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] dx = out
    # rows in order: a pixel receives its terms with (i, j) descending, the
    # same order the numpy path uses
    with nogil:
        for b in range(n):
            for p in range(oh):
                for q in range(ow):
                    row = (b * oh + p) * ow + q
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                dx[b, ch, p * stride + i, q * stride + j] += cols[row, col]
                                col += 1
    return out


def maxpool_forward(const real[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1, ow = (w - k) // stride + 1
    cdef Py_ssize_t b, ch, p, q, i, j, best_at, r, s
    cdef real best, v
    out = np.empty((n, c, oh, ow), dtype=_dtype(x))
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, ::1] a = arg
    with nogil:
        for b in range(n):
            for ch in range(c):
                for p in range(oh):
                    for q in range(ow):
                        r = p * stride
                        s = q * stride
                        best = x[b, ch, r, s]
                        best_at = r * w + s
                        for i in range(k):
                            for j in range(k):
                                v = x[b, ch, r + i, s + j]
                                if v > best:
                                    best = v
                                    best_at = (r + i) * w + s + j
                        o[b, ch, p, q] = best
                        a[b, ch, p, q] = best_at
    return out, arg


def maxpool_backward(const real[:, :, :, ::1] gout, const cnp.int64_t[:, :, :, ::1] arg, tuple x_shape):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = gout.shape[2], ow = gout.shape[3], b, ch, p, q, at
    out = np.zeros((n, c, h, w), dtype=_dtype(gout))
    cdef real[:, :, :, ::1] dx = out
    with nogil:
        for b in range(n):
            for ch in range(c):
                for p in range(oh):
                    for q in range(ow):
                        at = arg[b, ch, p, q]
                        dx[b, ch, at // w, at % w] += gout[b, ch, p, q]
    return out
