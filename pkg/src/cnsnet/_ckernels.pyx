# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution lowering, max pooling and row softmax.

Every function here has a numpy twin in ``_pykernels`` with the same
signature and the same output layout.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

ctypedef fused real_t:
    float
    double


def im2col(real_t[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    """Lower an NCHW batch to a (N*OH*OW, C*kh*kw) patch matrix."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real_t is float else np.float64
    out_arr = np.zeros((n * oh * ow, c * kh * kw), dtype=dtype)
    cdef real_t[:, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, ki, kj, row, col, yy, xx
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                for ch in range(c):
                    for ki in range(kh):
                        yy = i * stride + ki - pad
                        if yy < 0 or yy >= h:
                            continue
                        for kj in range(kw):
                            xx = j * stride + kj - pad
                            if xx < 0 or xx >= w:
                                continue
                            col = (ch * kh + ki) * kw + kj
                            out[row, col] = x[b, ch, yy, xx]
    return out_arr


def col2im(real_t[:, ::1] cols, tuple x_shape, int kh, int kw, int stride, int pad):
    """Scatter-add a patch matrix back onto an NCHW gradient buffer."""
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real_t is float else np.float64
    dx_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real_t[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, i, j, ki, kj, row, col, yy, xx
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                row = (b * oh + i) * ow + j
                for ch in range(c):
                    for ki in range(kh):
                        yy = i * stride + ki - pad
                        if yy < 0 or yy >= h:
                            continue
                        for kj in range(kw):
                            xx = j * stride + kj - pad
                            if xx < 0 or xx >= w:
                                continue
                            col = (ch * kh + ki) * kw + kj
                            dx[b, ch, yy, xx] += cols[row, col]
    return dx_arr


def maxpool_forward(real_t[:, :, :, ::1] x, int k, int stride):
    """Max pooling without padding; returns (out, flat argmax into each H*W plane)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    dtype = np.float32 if real_t is float else np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    arg_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real_t[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, i, j, ki, kj, yy, xx, best_idx
    cdef real_t best, v
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    yy = i * stride
                    xx = j * stride
                    best = x[b, ch, yy, xx]
                    best_idx = yy * w + xx
                    for ki in range(k):
                        for kj in range(k):
                            v = x[b, ch, yy + ki, xx + kj]
                            if v > best:
                                best = v
                                best_idx = (yy + ki) * w + xx + kj
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = best_idx
    return out_arr, arg_arr


def maxpool_backward(real_t[:, :, :, ::1] dout, cnp.int64_t[:, :, :, ::1] arg, tuple x_shape):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    dtype = np.float32 if real_t is float else np.float64
    dx_arr = np.zeros((n, c, h * w), dtype=dtype)
    cdef real_t[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, i, j
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    dx[b, ch, arg[b, ch, i, j]] += dout[b, ch, i, j]
    return dx_arr.reshape((n, c, h, w))


def softmax_rows(real_t[:, ::1] logits):
    """Max-shifted softmax per row with double-precision accumulation."""
    cdef Py_ssize_t n = logits.shape[0], k = logits.shape[1]
    dtype = np.float32 if real_t is float else np.float64
    out_arr = np.empty((n, k), dtype=dtype)
    cdef real_t[:, ::1] out = out_arr
    cdef double[::1] buf = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t r, j
    cdef double m, s
    for r in range(n):
        m = logits[r, 0]
        for j in range(1, k):
            if logits[r, j] > m:
                m = logits[r, j]
        s = 0.0
        for j in range(k):
            buf[j] = exp(<double>logits[r, j] - m)
            s += buf[j]
        for j in range(k):
            out[r, j] = <real_t>(buf[j] / s)
    return out_arr
