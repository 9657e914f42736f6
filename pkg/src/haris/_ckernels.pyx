# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the spatial kernels; same contracts as ``_pykernels``.

Floating-point operations are issued in the same order as the numpy fallback,
so both backends produce bit-identical results.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col3x3(double[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    out = np.zeros((b, h, w, 9 * c))
    cdef double[:, :, :, ::1] cols = out
    cdef Py_ssize_t n, i, j, dy, dx, ch, yy, xx, base
    for n in range(b):
        for i in range(h):
            for j in range(w):
                for dy in range(3):
                    yy = i + dy - 1
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(3):
                        xx = j + dx - 1
                        if xx < 0 or xx >= w:
                            continue
                        base = (dy * 3 + dx) * c
                        for ch in range(c):
                            cols[n, i, j, base + ch] = x[n, yy, xx, ch]
    return out


def col2im3x3(double[:, :, :, ::1] cols, Py_ssize_t c):
    cdef Py_ssize_t b = cols.shape[0], h = cols.shape[1], w = cols.shape[2]
    out = np.zeros((b, h, w, c))
    cdef double[:, :, :, ::1] x = out
    cdef Py_ssize_t n, i, j, dy, dx, ch, yy, xx, base
    # tap-major order: each pixel accumulates its nine contributions in (dy, dx) order
    for dy in range(3):
        for dx in range(3):
            base = (dy * 3 + dx) * c
            for n in range(b):
                for i in range(h):
                    yy = i + dy - 1
                    if yy < 0 or yy >= h:
                        continue
                    for j in range(w):
                        xx = j + dx - 1
                        if xx < 0 or xx >= w:
                            continue
                        for ch in range(c):
                            x[n, yy, xx, ch] += cols[n, i, j, base + ch]
    return out


cdef inline Py_ssize_t _partner(Py_ssize_t o, Py_ssize_t n) nogil:
    # input index carrying the 0.25 weight for output o (edge-clamped)
    cdef Py_ssize_t i = o >> 1
    if o & 1:
        i += 1
    else:
        i -= 1
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


def upsample2x(double[:, :, :, ::1] x):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    tmp_arr = np.empty((b, 2 * h, w, c))
    out = np.empty((b, 2 * h, 2 * w, c))
    cdef double[:, :, :, ::1] tmp = tmp_arr
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t n, o, j, ch, i0, i1
    for n in range(b):
        for o in range(2 * h):
            i0 = o >> 1
            i1 = _partner(o, h)
            for j in range(w):
                for ch in range(c):
                    tmp[n, o, j, ch] = 0.75 * x[n, i0, j, ch] + 0.25 * x[n, i1, j, ch]
    for n in range(b):
        for j in range(2 * h):
            for o in range(2 * w):
                i0 = o >> 1
                i1 = _partner(o, w)
                for ch in range(c):
                    y[n, j, o, ch] = 0.75 * tmp[n, j, i0, ch] + 0.25 * tmp[n, j, i1, ch]
    return out


cdef double _fold(double ge_j, double go_j, double ge_next, double go_prev,
                  double ge_0, double go_last, Py_ssize_t j, Py_ssize_t n) nogil:
    cdef double t = 0.75 * (ge_j + go_j)
    if j < n - 1:
        t += 0.25 * ge_next
    if j == 0:
        t += 0.25 * ge_0
    if j >= 1:
        t += 0.25 * go_prev
    if j == n - 1:
        t += 0.25 * go_last
    return t


def upsample2x_backward(double[:, :, :, ::1] g):
    cdef Py_ssize_t b = g.shape[0], h2 = g.shape[1], w2 = g.shape[2], c = g.shape[3]
    cdef Py_ssize_t h = h2 // 2, w = w2 // 2
    tmp_arr = np.empty((b, h2, w, c))
    out = np.empty((b, h, w, c))
    cdef double[:, :, :, ::1] tmp = tmp_arr
    cdef double[:, :, :, ::1] x = out
    cdef Py_ssize_t n, r, j, ch, jn, jp
    # width axis first, mirroring the fallback
    for n in range(b):
        for r in range(h2):
            for j in range(w):
                jn = j + 1 if j < w - 1 else j
                jp = j - 1 if j >= 1 else j
                for ch in range(c):
                    tmp[n, r, j, ch] = _fold(
                        g[n, r, 2 * j, ch], g[n, r, 2 * j + 1, ch],
                        g[n, r, 2 * jn, ch], g[n, r, 2 * jp + 1, ch],
                        g[n, r, 0, ch], g[n, r, 2 * w - 1, ch], j, w)
    for n in range(b):
        for j in range(h):
            jn = j + 1 if j < h - 1 else j
            jp = j - 1 if j >= 1 else j
            for r in range(w):
                for ch in range(c):
                    x[n, j, r, ch] = _fold(
                        tmp[n, 2 * j, r, ch], tmp[n, 2 * j + 1, r, ch],
                        tmp[n, 2 * jn, r, ch], tmp[n, 2 * jp + 1, r, ch],
                        tmp[n, 0, r, ch], tmp[n, 2 * h - 1, r, ch], j, h)
    return out
