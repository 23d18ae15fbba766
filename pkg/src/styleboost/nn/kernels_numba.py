"""Numba-compiled direct convolution kernels.

Hot lane: explicit loops with a SIMD-friendly innermost axis and `prange`
across independent output slices; the stride-1 case gets specialized inner
loops so LLVM can vectorize them. Each output cell is reduced sequentially
inside one thread, so results are reproducible run-to-run regardless of
thread count. First call per dtype pays a JIT compile (cached on disk
afterwards).
"""

import numpy as np
from numba import njit, prange


@njit(cache=True)
def _pad_input(x, pad):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    return xp


@njit(cache=True)
def _transpose_w(w):
    # (O,C,KH,KW) -> (C,KH,KW,O) so the innermost loop runs over O
    o, c, kh, kw = w.shape
    wt = np.empty((c, kh, kw, o), dtype=w.dtype)
    for i in range(o):
        for j in range(c):
            for a in range(kh):
                for bb in range(kw):
                    wt[j, a, bb, i] = w[i, j, a, bb]
    return wt


@njit(parallel=True, fastmath=True, cache=True)
def _conv2d_forward_padded(xp, wt, b, stride, oh, ow):
    n, c, hp, wp = xp.shape
    kh, kw, o = wt.shape[1], wt.shape[2], wt.shape[3]
    y = np.empty((n, o, oh, ow), dtype=xp.dtype)
    for nr in prange(n * oh):
        i = nr // oh
        r = nr % oh
        acc = np.empty((ow, o), dtype=xp.dtype)
        for q in range(ow):
            for v in range(o):
                acc[q, v] = b[v]
        for j in range(c):
            for a in range(kh):
                xrow = xp[i, j, r * stride + a]
                for bb in range(kw):
                    wrow = wt[j, a, bb]
                    if stride == 1:
                        for q in range(ow):
                            xv = xrow[q + bb]
                            for v in range(o):
                                acc[q, v] += xv * wrow[v]
                    else:
                        for q in range(ow):
                            xv = xrow[q * stride + bb]
                            for v in range(o):
                                acc[q, v] += xv * wrow[v]
        for v in range(o):
            for q in range(ow):
                y[i, v, r, q] = acc[q, v]
    return y


@njit(parallel=True, fastmath=True, cache=True)
def _conv2d_backward_input_padded(gy, w, stride, hp, wp):
    n, o, oh, ow = gy.shape
    c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    gxp = np.zeros((n, c, hp, wp), dtype=gy.dtype)
    for nj in prange(n * c):
        i = nj // c
        j = nj % c
        for v in range(o):
            for r in range(oh):
                grow = gy[i, v, r]
                for a in range(kh):
                    gxrow = gxp[i, j, r * stride + a]
                    for bb in range(kw):
                        wv = w[v, j, a, bb]
                        if stride == 1:
                            for q in range(ow):
                                gxrow[q + bb] += wv * grow[q]
                        else:
                            for q in range(ow):
                                gxrow[q * stride + bb] += wv * grow[q]
    return gxp


@njit(parallel=True, fastmath=True, cache=True)
def _conv2d_backward_weights_padded(xp, gy, stride, kh, kw):
    n, c = xp.shape[0], xp.shape[1]
    o, oh, ow = gy.shape[1], gy.shape[2], gy.shape[3]
    gw = np.zeros((o, c, kh, kw), dtype=xp.dtype)
    for v in prange(o):
        acc = np.zeros((c, kh, kw), dtype=xp.dtype)
        for i in range(n):
            for r in range(oh):
                grow = gy[i, v, r]
                for j in range(c):
                    for a in range(kh):
                        xrow = xp[i, j, r * stride + a]
                        for bb in range(kw):
                            s = xp.dtype.type(0.0)
                            if stride == 1:
                                for q in range(ow):
                                    s += grow[q] * xrow[q + bb]
                            else:
                                for q in range(ow):
                                    s += grow[q] * xrow[q * stride + bb]
                            acc[j, a, bb] += s
        gw[v] = acc
    return gw


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride, pad):
    xp = _pad_input(x, pad) if pad > 0 else np.ascontiguousarray(x)
    oh = _out_size(x.shape[2], w.shape[2], stride, pad)
    ow = _out_size(x.shape[3], w.shape[3], stride, pad)
    return _conv2d_forward_padded(xp, _transpose_w(w), b, stride, oh, ow)


def conv2d_backward_weights(x, gy, stride, pad, kh, kw):
    xp = _pad_input(x, pad) if pad > 0 else np.ascontiguousarray(x)
    return _conv2d_backward_weights_padded(xp, np.ascontiguousarray(gy),
                                           stride, kh, kw)


def conv2d_backward_input(gy, w, stride, pad, h, w_in):
    hp, wp = h + 2 * pad, w_in + 2 * pad
    gxp = _conv2d_backward_input_padded(np.ascontiguousarray(gy), w,
                                        stride, hp, wp)
    if pad > 0:
        return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w_in])
    return gxp
