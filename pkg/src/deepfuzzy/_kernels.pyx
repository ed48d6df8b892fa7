# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels backing conv2d and avg_pool2d."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    out_arr = np.empty((n * oh * ow, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, ch, ky, kx, row, col, y0, x0
    with nogil:
        for b in range(n):
            for oy in range(oh):
                y0 = oy * stride
                for ox in range(ow):
                    x0 = ox * stride
                    row = (b * oh + oy) * ow + ox
                    col = 0
                    for ch in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                out[row, col] = x[b, ch, y0 + ky, x0 + kx]
                                col += 1
    return out_arr


def col2im(const double[:, ::1] cols, tuple shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h - kh) // stride + 1
    cdef Py_ssize_t ow = (w - kw) // stride + 1
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, ch, ky, kx, row, col, y0, x0
    # rows in (oy, ox) order: each output pixel sees its contributions with
    # (ky, kx) descending, the same order as the numpy fallback
    with nogil:
        for b in range(n):
            for oy in range(oh):
                y0 = oy * stride
                for ox in range(ow):
                    x0 = ox * stride
                    row = (b * oh + oy) * ow + ox
                    col = 0
                    for ch in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                out[b, ch, y0 + ky, x0 + kx] += cols[row, col]
                                col += 1
    return out_arr
