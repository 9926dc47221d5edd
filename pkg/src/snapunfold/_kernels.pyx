# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: depthwise convolution and the TV dual loop.

Same call signatures as ``snapunfold._kernels_py``.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def _dw_forward(const real[:, :, :, ::1] xpad, const real[:, :, ::1] w,
                real[:, :, :, ::1] out, Py_ssize_t stride):
    # out must be zeroed; the innermost loop runs along output columns
    cdef Py_ssize_t b = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t n, ch, i, j, p, q
    cdef real wv
    cdef const real* xrow
    cdef real* orow
    with nogil:
        for n in range(b):
            for ch in range(c):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[ch, p, q]
                        for i in range(ho):
                            xrow = &xpad[n, ch, i * stride + p, q]
                            orow = &out[n, ch, i, 0]
                            for j in range(wo):
                                orow[j] += wv * xrow[j * stride]


def _dw_backward_input(const real[:, :, :, ::1] g, const real[:, :, ::1] w,
                       real[:, :, :, ::1] gx, Py_ssize_t stride):
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t n, ch, i, j, p, q
    cdef real wv
    cdef const real* grow
    cdef real* xrow
    with nogil:
        for n in range(b):
            for ch in range(c):
                for p in range(kh):
                    for q in range(kw):
                        wv = w[ch, p, q]
                        for i in range(ho):
                            grow = &g[n, ch, i, 0]
                            xrow = &gx[n, ch, i * stride + p, q]
                            for j in range(wo):
                                xrow[j * stride] += wv * grow[j]


def _dw_backward_weight(const real[:, :, :, ::1] xpad, const real[:, :, :, ::1] g,
                        real[:, :, ::1] gw, Py_ssize_t stride, double[::1] acc):
    # acc holds one partial sum per output column so the inner loop vectorizes
    cdef Py_ssize_t b = g.shape[0], c = g.shape[1]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t kh = gw.shape[1], kw = gw.shape[2]
    cdef Py_ssize_t n, ch, i, j, p, q
    cdef double total
    cdef const real* grow
    cdef const real* xrow
    with nogil:
        for ch in range(c):
            for p in range(kh):
                for q in range(kw):
                    for j in range(wo):
                        acc[j] = 0
                    for n in range(b):
                        for i in range(ho):
                            grow = &g[n, ch, i, 0]
                            xrow = &xpad[n, ch, i * stride + p, q]
                            for j in range(wo):
                                acc[j] += <double>grow[j] * xrow[j * stride]
                    total = 0
                    for j in range(wo):
                        total += acc[j]
                    gw[ch, p, q] = <real>total


def dw_forward(xpad, w, stride):
    xpad = np.ascontiguousarray(xpad)
    w = np.ascontiguousarray(w, dtype=xpad.dtype)
    b, c, H, W = xpad.shape
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((b, c, (H - kh) // stride + 1, (W - kw) // stride + 1), dtype=xpad.dtype)
    _dw_forward(xpad, w, out, stride)
    return out


def dw_backward_input(g, w, stride, H, W):
    g = np.ascontiguousarray(g)
    w = np.ascontiguousarray(w, dtype=g.dtype)
    gx = np.zeros((g.shape[0], g.shape[1], H, W), dtype=g.dtype)
    _dw_backward_input(g, w, gx, stride)
    return gx


def dw_backward_weight(xpad, g, kh, kw, stride):
    xpad = np.ascontiguousarray(xpad)
    g = np.ascontiguousarray(g, dtype=xpad.dtype)
    gw = np.empty((g.shape[1], kh, kw), dtype=xpad.dtype)
    _dw_backward_weight(xpad, g, gw, stride, np.zeros(g.shape[3], dtype=np.float64))
    return gw


cdef inline real _clip1(real v) noexcept nogil:
    if v > 1:
        return 1
    if v < -1:
        return -1
    return v


def _tv_dual(const real[:, :, ::1] f, real[:, :, ::1] u, real[:, :, ::1] px,
             real[:, :, ::1] py, real weight, Py_ssize_t iters, real step):
    cdef Py_ssize_t n = f.shape[0], h = f.shape[1], w = f.shape[2]
    cdef Py_ssize_t k, m, i, j
    cdef real d
    with nogil:
        for k in range(iters):
            for m in range(n):
                for i in range(h):
                    for j in range(w):
                        if i < h - 1:
                            px[m, i, j] = _clip1(px[m, i, j] + step * (u[m, i + 1, j] - u[m, i, j]))
                        if j < w - 1:
                            py[m, i, j] = _clip1(py[m, i, j] + step * (u[m, i, j + 1] - u[m, i, j]))
                for i in range(h):
                    for j in range(w):
                        d = 0
                        if i < h - 1:
                            d = d - px[m, i, j]
                        if i > 0:
                            d = d + px[m, i - 1, j]
                        if j < w - 1:
                            d = d - py[m, i, j]
                        if j > 0:
                            d = d + py[m, i, j - 1]
                        u[m, i, j] = f[m, i, j] - weight * d


def tv_dual(f, weight, iters, tau):
    f = np.ascontiguousarray(f)
    u = f.copy()
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    _tv_dual(f, u, px, py, f.dtype.type(weight), iters, f.dtype.type(tau / weight))
    return u
