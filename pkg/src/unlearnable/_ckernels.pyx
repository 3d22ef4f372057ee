# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution / pooling kernels (twins of ``_kernels_py``)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.empty((n * ho * wo, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, oh, ow, ch, i, j, row, col, r, s
    with nogil:
        for b in range(n):
            for oh in range(ho):
                for ow in range(wo):
                    row = (b * ho + oh) * wo + ow
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            r = oh * stride + i - pad
                            for j in range(kw):
                                s = ow * stride + j - pad
                                if r < 0 or r >= h or s < 0 or s >= w:
                                    cols[row, col] = 0.0
                                else:
                                    cols[row, col] = x[b, ch, r, s]
                                col += 1
    return out


def col2im(double[:, ::1] cols, tuple x_shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, oh, ow, ch, i, j, row, col, r, s
    # (i, j) outermost per element: same summation order as the numpy twin.
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        col = (ch * kh + i) * kw + j
                        for oh in range(ho):
                            r = oh * stride + i - pad
                            if r < 0 or r >= h:
                                continue
                            for ow in range(wo):
                                s = ow * stride + j - pad
                                if s < 0 or s >= w:
                                    continue
                                row = (b * ho + oh) * wo + ow
                                dx[b, ch, r, s] += cols[row, col]
    return out


def maxpool2d_forward(double[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1
    out = np.empty((n, c, ho, wo), dtype=np.float64)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, ch, oh, ow, i, j, best
    cdef double v, m
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        m = x[b, ch, oh * stride, ow * stride]
                        best = 0
                        for i in range(k):
                            for j in range(k):
                                v = x[b, ch, oh * stride + i, ow * stride + j]
                                if v > m:
                                    m = v
                                    best = i * k + j
                        o[b, ch, oh, ow] = m
                        a[b, ch, oh, ow] = best
    return out, arg


def maxpool2d_backward(double[:, :, :, ::1] grad_out, cnp.int64_t[:, :, :, ::1] arg,
                       tuple x_shape, int k, int stride):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, oh, ow, p
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        p = arg[b, ch, oh, ow]
                        dx[b, ch, oh * stride + p // k, ow * stride + p % k] += grad_out[b, ch, oh, ow]
    return out
