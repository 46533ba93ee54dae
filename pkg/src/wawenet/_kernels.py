"""Compiled per-channel loops for the memory-bound primitives.

Each kernel works on contiguous ``(batch, channels, samples)`` arrays,
accumulates in float64 and writes in the storage dtype.  The numpy
implementations in :mod:`wawenet.dsp` remain the reference.
"""

import numpy as np
from numba import njit

_FM = {"reassoc", "contract"}


@njit(cache=True, fastmath=_FM)
def channel_stats(x):
    b, c, n = x.shape
    count = b * n
    mean = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        s = 0.0
        for i in range(b):
            for k in range(n):
                s += x[i, ch, k]
        m = s / count
        ss = 0.0
        for i in range(b):
            for k in range(n):
                d = x[i, ch, k] - m
                ss += d * d
        mean[ch] = m
        var[ch] = ss / count
    return mean, var


@njit(cache=True, fastmath=_FM)
def gain_bias(x, a, bias, out):
    b, c, n = x.shape
    for i in range(b):
        for ch in range(c):
            ac = a[ch]
            bc = bias[ch]
            for k in range(n):
                out[i, ch, k] = ac * x[i, ch, k] + bc


@njit(cache=True, fastmath=_FM)
def norm_backward(x, g, mean, invstd, gamma, training, out):
    b, c, n = x.shape
    count = b * n
    sg = np.zeros(c)
    sgd = np.zeros(c)
    for ch in range(c):
        m = mean[ch]
        s1 = 0.0
        s2 = 0.0
        for i in range(b):
            for k in range(n):
                gv = g[i, ch, k]
                s1 += gv
                s2 += gv * (x[i, ch, k] - m)
        sg[ch] = s1
        sgd[ch] = s2
    for ch in range(c):
        a = gamma[ch] * invstd[ch]
        m = mean[ch]
        shift = sg[ch] / count if training else 0.0
        slope = invstd[ch] * invstd[ch] * sgd[ch] / count if training else 0.0
        for i in range(b):
            for k in range(n):
                out[i, ch, k] = a * (g[i, ch, k] - shift - (x[i, ch, k] - m) * slope)
    return invstd * sgd, sg


@njit(cache=True, fastmath=_FM)
def block_mean(x, m, out):
    b, c, n = x.shape
    blocks = n // m
    for i in range(b):
        for ch in range(c):
            row = x[i, ch]
            dst = out[i, ch]
            if m == 2:
                for j in range(blocks):
                    dst[j] = (np.float64(row[2 * j]) + row[2 * j + 1]) / 2.0
            elif m == 3:
                for j in range(blocks):
                    dst[j] = (np.float64(row[3 * j]) + row[3 * j + 1] + row[3 * j + 2]) / 3.0
            elif m == 4:
                for j in range(blocks):
                    k = 4 * j
                    dst[j] = (np.float64(row[k]) + row[k + 1] + row[k + 2] + row[k + 3]) / 4.0
            else:
                for j in range(blocks):
                    s = 0.0
                    for t in range(m):
                        s += row[j * m + t]
                    dst[j] = s / m


@njit(cache=True, fastmath=_FM)
def fir_direct(x, w, offset, out):
    """Correlate with 3-tap kernels directly; for banks with few input channels."""
    b, cin, n = x.shape
    cout = w.shape[0]
    for i in range(b):
        for o in range(cout):
            dst = out[i, o]
            for k in range(n):
                dst[k] = offset[o]
            for ci in range(cin):
                src = x[i, ci]
                h0 = w[o, ci, 0]
                h1 = w[o, ci, 1]
                h2 = w[o, ci, 2]
                dst[0] += h1 * src[0] + (h2 * src[1] if n > 1 else 0.0)
                for k in range(1, n - 1):
                    dst[k] += h0 * src[k - 1] + h1 * src[k] + h2 * src[k + 1]
                if n > 1:
                    dst[n - 1] += h0 * src[n - 2] + h1 * src[n - 1]


@njit(cache=True, fastmath=_FM)
def fir_direct_weight_grad(x, g):
    """Kernel and offset gradients of :func:`fir_direct`, accumulated in float64."""
    b, cin, n = x.shape
    cout = g.shape[1]
    gw = np.zeros((cout, cin, 3))
    goff = np.zeros(cout)
    for i in range(b):
        for o in range(cout):
            gr = g[i, o]
            s = 0.0
            for k in range(n):
                s += gr[k]
            goff[o] += s
            for ci in range(cin):
                src = x[i, ci]
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                for k in range(n):
                    s1 += gr[k] * src[k]
                for k in range(1, n):
                    s0 += gr[k] * src[k - 1]
                    s2 += gr[k - 1] * src[k]
                gw[o, ci, 0] += s0
                gw[o, ci, 1] += s1
                gw[o, ci, 2] += s2
    return gw, goff


@njit(cache=True, fastmath=_FM)
def block_spread(g, m, out):
    b, c, blocks = g.shape
    for i in range(b):
        for ch in range(c):
            for j in range(blocks):
                v = g[i, ch, j] / m
                for t in range(m):
                    out[i, ch, j * m + t] = v


@njit(cache=True, fastmath=_FM)
def gain_relu_pool(x, a, bias, m, out):
    # rounds each rectified sample to the storage dtype, as the unfused path does
    b, c, n = x.shape
    blocks = n // m
    cell = np.empty(1, dtype=out.dtype)
    for i in range(b):
        for ch in range(c):
            ac = a[ch]
            bc = bias[ch]
            for j in range(blocks):
                s = 0.0
                for t in range(m):
                    v = ac * x[i, ch, j * m + t] + bc
                    cell[0] = v if v > 0.0 else 0.0
                    s += cell[0]
                out[i, ch, j] = s / m
