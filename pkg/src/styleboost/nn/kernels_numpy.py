"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Reference lane: always available, no JIT warm-up. Matmuls run per sample so
the arithmetic for one image does not depend on how many others share the
batch.
"""

import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    if pad > 0:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def conv2d_forward(x, w, b, stride, pad):
    n = x.shape[0]
    o, c, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    wf = w.reshape(o, c * kh * kw)
    y = np.empty((n, o, oh * ow), dtype=x.dtype)
    for i in range(n):
        y[i] = wf @ cols[i]
    y += b.reshape(1, o, 1)
    return y.reshape(n, o, oh, ow)


def conv2d_backward_weights(x, gy, stride, pad, kh, kw):
    n, c = x.shape[0], x.shape[1]
    o = gy.shape[1]
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    g = gy.reshape(n, o, oh * ow)
    gw = np.zeros((o, c * kh * kw), dtype=x.dtype)
    for i in range(n):
        gw += g[i] @ cols[i].T
    return gw.reshape(o, c, kh, kw)


def conv2d_backward_input(gy, w, stride, pad, h, w_in):
    n = gy.shape[0]
    o, c, kh, kw = w.shape
    oh, ow = gy.shape[2], gy.shape[3]
    wf = w.reshape(o, c * kh * kw)
    g = gy.reshape(n, o, oh * ow)
    gcols = np.empty((n, c * kh * kw, oh * ow), dtype=gy.dtype)
    for i in range(n):
        gcols[i] = wf.T @ g[i]
    gcols = gcols.reshape(n, c, kh, kw, oh, ow)
    gxp = np.zeros((n, c, h + 2 * pad, w_in + 2 * pad), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += gcols[:, :, i, j]
    if pad > 0:
        return gxp[:, :, pad:pad + h, pad:pad + w_in]
    return gxp
