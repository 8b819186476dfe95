# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled windowed kernels. Mirrors ``_pykernels`` exactly, loop order included."""
import numpy as np


def im2col(const double[:, :, :, ::1] x, int f, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - f) // stride + 1
    cdef Py_ssize_t wo = (w - f) // stride + 1
    cdef Py_ssize_t ff = f * f
    out_arr = np.empty((n * ho * wo, c * ff))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, ch, ki, kj, row, col, i0, j0
    for b in range(n):
        for i in range(ho):
            i0 = i * stride
            for j in range(wo):
                j0 = j * stride
                row = (b * ho + i) * wo + j
                col = 0
                for ch in range(c):
                    for ki in range(f):
                        for kj in range(f):
                            out[row, col] = x[b, ch, i0 + ki, j0 + kj]
                            col += 1
    return out_arr


def col2im(const double[:, ::1] cols, shape, int f, int stride):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h - f) // stride + 1
    cdef Py_ssize_t wo = (w - f) // stride + 1
    out_arr = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, ch, ki, kj, row, base
    # (ki, kj) outermost so each output cell accumulates in the numpy backend's order
    for ki in range(f):
        for kj in range(f):
            for b in range(n):
                for i in range(ho):
                    for j in range(wo):
                        row = (b * ho + i) * wo + j
                        base = ki * f + kj
                        for ch in range(c):
                            out[b, ch, i * stride + ki, j * stride + kj] += cols[row, ch * f * f + base]
    return out_arr


def depthwise_forward(const double[:, :, :, ::1] x, const double[:, :, ::1] w, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[1]
    cdef Py_ssize_t ho = (h - f) // stride + 1
    cdef Py_ssize_t wo = (wd - f) // stride + 1
    out_arr = np.zeros((n, c, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, i, j, ki, kj
    cdef double acc
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ki in range(f):
                        for kj in range(f):
                            acc = acc + w[ch, ki, kj] * x[b, ch, i * stride + ki, j * stride + kj]
                    out[b, ch, i, j] = acc
    return out_arr


def depthwise_backward(const double[:, :, :, ::1] x, const double[:, :, ::1] w,
                       const double[:, :, :, ::1] grad_out, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t f = w.shape[1]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    gx_arr = np.zeros((x.shape[0], x.shape[1], x.shape[2], x.shape[3]))
    gw_arr = np.zeros((w.shape[0], w.shape[1], w.shape[2]))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, ch, i, j, ki, kj
    cdef double g, acc
    for ki in range(f):
        for kj in range(f):
            for ch in range(c):
                acc = 0.0
                for b in range(n):
                    for i in range(ho):
                        for j in range(wo):
                            g = grad_out[b, ch, i, j]
                            gx[b, ch, i * stride + ki, j * stride + kj] += w[ch, ki, kj] * g
                            acc += x[b, ch, i * stride + ki, j * stride + kj] * g
                gw[ch, ki, kj] = acc
    return gx_arr, gw_arr
