"""Explicit-loop kernels compiled with numba.

Signatures and results match ``_numpy.py``; only the evaluation order of
floating-point sums may differ.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def interval_affine(W, b, lo, hi):
    mu = (hi + lo) / 2.0
    r = (hi - lo) / 2.0
    out_mu = mu @ np.ascontiguousarray(W.T)
    out_r = r @ np.ascontiguousarray(np.abs(W).T)
    K, m = out_mu.shape
    for k in range(K):
        for i in range(m):
            c = out_mu[k, i] + b[i]
            out_mu[k, i] = c - out_r[k, i]
            out_r[k, i] = c + out_r[k, i]
    return out_mu, out_r


@njit(cache=True)
def relu_phase_bounds(lo, hi, phase):
    K, n = lo.shape
    zlo = lo.copy()
    zhi = hi.copy()
    plo = np.empty_like(lo)
    phi = np.empty_like(hi)
    infeasible = np.zeros(K, dtype=np.bool_)
    for k in range(K):
        for j in range(n):
            p = phase[k, j]
            if p == 1:
                if hi[k, j] < 0.0:
                    infeasible[k] = True
                zlo[k, j] = max(lo[k, j], 0.0)
            elif p == -1:
                if lo[k, j] > 0.0:
                    infeasible[k] = True
                zhi[k, j] = min(hi[k, j], 0.0)
            if p == -1:
                plo[k, j] = 0.0
                phi[k, j] = 0.0
            else:
                plo[k, j] = max(zlo[k, j], 0.0)
                phi[k, j] = max(zhi[k, j], 0.0)
    return zlo, zhi, plo, phi, infeasible


@njit(cache=True)
def crown_relu_backward(lam, zlo, zhi, phase):
    K, m, n = lam.shape
    lam_z = np.empty_like(lam)
    const = np.zeros((K, m))
    for k in range(K):
        for j in range(n):
            l = zlo[k, j]
            u = zhi[k, j]
            p = phase[k, j]
            if p == -1 or u <= 0.0:
                for i in range(m):
                    lam_z[k, i, j] = 0.0
            elif p == 1 or l >= 0.0:
                for i in range(m):
                    lam_z[k, i, j] = lam[k, i, j]
            else:
                a = u / (u - l)
                c = -u * l / (u - l)
                alpha = 1.0 if u >= -l else 0.0
                for i in range(m):
                    v = lam[k, i, j]
                    if v >= 0.0:
                        lam_z[k, i, j] = v * alpha
                    else:
                        lam_z[k, i, j] = v * a
                        const[k, i] += v * c
    return lam_z, const


@njit(cache=True)
def box_min(lam, const, lo, hi):
    K, m, n = lam.shape
    values = np.empty((K, m))
    corners = np.empty((K, m, n))
    for k in range(K):
        for i in range(m):
            acc = const[k, i]
            for j in range(n):
                v = lam[k, i, j]
                if v > 0.0:
                    acc += v * lo[j]
                    corners[k, i, j] = lo[j]
                else:
                    acc += v * hi[j]
                    corners[k, i, j] = hi[j]
            values[k, i] = acc
    return values, corners


@njit(cache=True)
def branch_scores(zlo, zhi, phase):
    K, n = zlo.shape
    out = np.empty((K, n))
    for k in range(K):
        for j in range(n):
            if phase[k, j] == 0 and zlo[k, j] < 0.0 and zhi[k, j] > 0.0:
                out[k, j] = -zlo[k, j] * zhi[k, j]
            else:
                out[k, j] = -np.inf
    return out


@njit(cache=True)
def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((n, c * kh * kw, oh * ow), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(oh):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for ox in range(ow):
                            xx = ox * stride + j - pad
                            if 0 <= xx < w:
                                cols[b, row, oy * ow + ox] = x[b, ch, y, xx]
    return cols


@njit(cache=True)
def _col2im(cols, n, c, h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(oh):
                        y = oy * stride + i - pad
                        if y < 0 or y >= h:
                            continue
                        for ox in range(ow):
                            xx = ox * stride + j - pad
                            if 0 <= xx < w:
                                out[b, ch, y, xx] += cols[b, row, oy * ow + ox]
    return out


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    return _col2im(cols, n, c, h, w, kh, kw, stride, pad)
