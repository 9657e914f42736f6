"""Pure numpy versions of the spatial kernels (fallback backend).

All arrays are channels-last ``[B, H, W, C]`` float64.  The im2col column order
is ``(dy, dx, c)`` so that a ``[3, 3, Cin, Cout]`` kernel reshaped to
``[9 * Cin, Cout]`` lines up with it.
"""

import numpy as np


def im2col3x3(x):
    b, h, w, c = x.shape
    padded = np.zeros((b, h + 2, w + 2, c))
    padded[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 9 * c))
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[..., k * c:(k + 1) * c] = padded[:, dy:dy + h, dx:dx + w, :]
            k += 1
    return cols


def col2im3x3(cols, c):
    b, h, w, _ = cols.shape
    padded = np.zeros((b, h + 2, w + 2, c))
    k = 0
    for dy in range(3):
        for dx in range(3):
            padded[:, dy:dy + h, dx:dx + w, :] += cols[..., k * c:(k + 1) * c]
            k += 1
    return padded[:, 1:-1, 1:-1, :].copy()


def _up_axis(x, axis):
    # Output 2i samples 0.75*x[i] + 0.25*x[i-1]; 2i+1 samples 0.75*x[i] + 0.25*x[i+1]; edges clamp.
    n = x.shape[axis]
    prev = np.take(x, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(x, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_backward(g, axis):
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    ge = np.take(g, 0, axis=axis + 1)
    go = np.take(g, 1, axis=axis + 1)
    out = 0.75 * (ge + go)
    # even output i pulls 0.25 from input i-1 (clamped to 0)
    idx = [slice(None)] * out.ndim
    src = [slice(None)] * out.ndim
    idx[axis] = slice(0, n - 1)
    src[axis] = slice(1, n)
    out[tuple(idx)] += 0.25 * ge[tuple(src)]
    idx[axis] = slice(0, 1)
    src[axis] = slice(0, 1)
    out[tuple(idx)] += 0.25 * ge[tuple(src)]
    # odd output i pulls 0.25 from input i+1 (clamped to n-1)
    idx[axis] = slice(1, n)
    src[axis] = slice(0, n - 1)
    out[tuple(idx)] += 0.25 * go[tuple(src)]
    idx[axis] = slice(n - 1, n)
    src[axis] = slice(n - 1, n)
    out[tuple(idx)] += 0.25 * go[tuple(src)]
    return out


def upsample2x(x):
    return _up_axis(_up_axis(x, 1), 2)


def upsample2x_backward(g):
    return _up_axis_backward(_up_axis_backward(g, 2), 1)
