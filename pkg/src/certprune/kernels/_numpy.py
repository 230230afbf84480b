"""Vectorized numpy implementations of the bound kernels.

Every function here has a loop twin in ``_jit.py`` with the same signature.
Arrays are float64 unless noted; a leading ``K`` axis indexes subdomains.
"""

import numpy as np


def interval_affine(W, b, lo, hi):
    mu = (hi + lo) / 2.0
    r = (hi - lo) / 2.0
    mu_out = mu @ W.T + b
    r_out = r @ np.abs(W).T
    return mu_out - r_out, mu_out + r_out


def relu_phase_bounds(lo, hi, phase):
    """Intersect pre-activation bounds with phase constraints.

    phase: int8 array, 1 = active (z >= 0), -1 = inactive (z <= 0), 0 = free.
    Returns constrained (zlo, zhi), post-ReLU (plo, phi) and a per-row
    infeasibility flag.
    """
    active = phase == 1
    inactive = phase == -1
    zlo = np.where(active, np.maximum(lo, 0.0), lo)
    zhi = np.where(inactive, np.minimum(hi, 0.0), hi)
    bad = (active & (hi < 0.0)) | (inactive & (lo > 0.0))
    infeasible = bad.reshape(bad.shape[0], -1).any(axis=1)
    plo = np.where(inactive, 0.0, np.maximum(zlo, 0.0))
    phi = np.where(inactive, 0.0, np.maximum(zhi, 0.0))
    return zlo, zhi, plo, phi, infeasible


def crown_relu_backward(lam, zlo, zhi, phase):
    """Substitute h = relu(z) in lam . h by its lower relaxation.

    lam: (K, m, n); zlo, zhi, phase: (K, n).  Returns (lam_z, const) with
    lam . h >= lam_z . z + const on the constrained bounds.
    """
    dead = (phase == -1) | (zhi <= 0.0)
    live = ~dead & ((phase == 1) | (zlo >= 0.0))
    unstable = ~dead & ~live
    width = np.where(unstable, zhi - zlo, 1.0)
    up_slope = np.where(unstable, zhi / width, 0.0)
    up_icpt = np.where(unstable, -zhi * zlo / width, 0.0)
    lo_slope = np.where(unstable & (zhi >= -zlo), 1.0, 0.0)
    lo_slope = np.where(live, 1.0, lo_slope)
    up_slope = np.where(live, 1.0, up_slope)

    pos = lam >= 0.0
    slope = np.where(pos, lo_slope[:, None, :], up_slope[:, None, :])
    lam_z = lam * slope
    const = np.where(pos, 0.0, lam * up_icpt[:, None, :]).sum(axis=2)
    return lam_z, const


def box_min(lam, const, lo, hi):
    """Minimum of lam . x + const over the box [lo, hi] and its minimizer.

    lam: (K, m, n); lo, hi: (n,).  Returns (values (K, m), corners (K, m, n)).
    """
    mu = (hi + lo) / 2.0
    r = (hi - lo) / 2.0
    values = lam @ mu - np.abs(lam) @ r + const
    corners = np.where(lam > 0.0, lo, hi)
    return values, corners


def branch_scores(zlo, zhi, phase):
    unstable = (zlo < 0.0) & (zhi > 0.0) & (phase == 0)
    return np.where(unstable, -zlo * zhi, -np.inf)


def im2col(x, kh, kw, stride, pad):
    """(N, C, H, W) float32 -> (N, C*kh*kw, OH*OW) patch matrix."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]
