"""Slow reference implementations used as test oracles."""
import math

import numpy as np


def brute_radon_matrix(side, n_angles):
    """Ray-by-ray loop over the documented geometry, one bilinear lookup at a time."""
    pad = side // 2
    padded = side + 2 * pad
    centre = (padded - 1) / 2.0 - pad
    half = padded * math.sqrt(2.0) / 2.0
    n_samp = math.ceil(2 * half / 0.5)
    step = 2 * half / n_samp
    n_det = 2 * side + 1
    mat = np.zeros((n_angles * n_det, side * side))
    for a in range(n_angles):
        th = math.radians(a * 180.0 / n_angles)
        c, s = math.cos(th), math.sin(th)
        for k in range(n_det):
            u = k - side
            for j in range(n_samp):
                tau = -half + (j + 0.5) * step
                r = centre + u * s + tau * c
                q = centre + u * c - tau * s
                i0, j0 = math.floor(r), math.floor(q)
                for ii, jj in ((i0, j0), (i0, j0 + 1), (i0 + 1, j0), (i0 + 1, j0 + 1)):
                    if 0 <= ii < side and 0 <= jj < side:
                        w = (1 - abs(r - ii)) * (1 - abs(q - jj))
                        mat[a * n_det + k, ii * side + jj] += w * step
    return mat


def brute_circular_conv(x, k):
    n = x.shape[0]
    out = np.zeros_like(x)
    for i in range(n):
        for j in range(n):
            for p in range(n):
                for q in range(n):
                    out[i, j] += k[p, q] * x[(i - p) % n, (j - q) % n]
    return out


