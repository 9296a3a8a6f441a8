"""Hot loops: the parallel-beam projector and convolution patch extraction.

Each kernel has a numba ``@njit`` version and a pure-numpy version with
identical interpolation weights.  Set ``DAWNFM_NO_NUMBA=1`` to force the
numpy path; it is also used automatically when numba cannot be imported.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_AVAILABLE = numba is not None


def numba_enabled() -> bool:
    flag = os.environ.get("DAWNFM_NO_NUMBA", "").strip().lower()
    return NUMBA_AVAILABLE and flag not in ("1", "true", "yes", "on")


def retain_freed_memory() -> bool:
    """Keep freed blocks in the glibc heap instead of returning them to the OS.

    Large temporaries (im2col patches, activations) are otherwise mmap'd and
    page-faulted afresh on every call, which can cost as much as the
    arithmetic.  No-op off glibc or when ``DAWNFM_NO_MALLOPT`` is set.
    """
    if os.environ.get("DAWNFM_NO_MALLOPT"):
        return False
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    m_trim_threshold, m_mmap_max = -1, -4
    return bool(mallopt(m_mmap_max, 0)) and bool(mallopt(m_trim_threshold, 2 ** 31 - 1))


def _resolve(backend: str | None) -> str:
    if backend is None:
        return "numba" if numba_enabled() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend


def _ray_points(cos_a, sin_a, det, taus, origin):
    """Continuous (row, col) image coordinates of every ray sample for one angle."""
    u = det[:, None]
    tau = taus[None, :]
    x = u * cos_a - tau * sin_a
    y = u * sin_a + tau * cos_a
    return origin + y, origin + x


# ---------------------------------------------------------------- numpy path

def _angle_matrix(cos_a, sin_a, det, taus, step, origin, side):
    """Dense (n_det, side*side) weights of one projection angle."""
    rows, cols = _ray_points(cos_a, sin_a, det, taus, origin)
    i0 = np.floor(rows).astype(np.int64)
    j0 = np.floor(cols).astype(np.int64)
    fr = rows - i0
    fc = cols - j0
    n_det = det.shape[0]
    ray = np.broadcast_to(np.arange(n_det)[:, None], rows.shape)
    npix = side * side
    flat_idx = []
    flat_w = []
    for di, dj, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        ii = i0 + di
        jj = j0 + dj
        ok = (ii >= 0) & (ii < side) & (jj >= 0) & (jj < side)
        flat_idx.append((ray * npix + ii * side + jj)[ok])
        flat_w.append((w * step)[ok])
    idx = np.concatenate(flat_idx)
    wts = np.concatenate(flat_w)
    return np.bincount(idx, weights=wts, minlength=n_det * npix).reshape(n_det, npix)


def _forward_numpy(img, cos, sin, det, taus, step, origin):
    b, side, _ = img.shape
    flat = img.reshape(b, side * side)
    out = np.empty((b, cos.shape[0], det.shape[0]), dtype=np.float64)
    for a in range(cos.shape[0]):
        w = _angle_matrix(cos[a], sin[a], det, taus, step, origin, side)
        out[:, a, :] = flat @ w.T
    return out


def _adjoint_numpy(sino, cos, sin, det, taus, step, origin, side):
    b = sino.shape[0]
    out = np.zeros((b, side * side), dtype=np.float64)
    for a in range(cos.shape[0]):
        w = _angle_matrix(cos[a], sin[a], det, taus, step, origin, side)
        out += sino[:, a, :] @ w
    return out.reshape(b, side, side)


# ---------------------------------------------------------------- numba path

if NUMBA_AVAILABLE:

    @numba.njit(cache=True)
    def _forward_numba(img, cos, sin, det, taus, step, origin):
        nb, side, _ = img.shape
        na = cos.shape[0]
        nd = det.shape[0]
        ns = taus.shape[0]
        out = np.zeros((nb, na, nd))
        for a in range(na):
            ca = cos[a]
            sa = sin[a]
            for k in range(nd):
                u = det[k]
                for j in range(ns):
                    t = taus[j]
                    r = origin + u * sa + t * ca
                    c = origin + u * ca - t * sa
                    i0 = int(math.floor(r))
                    j0 = int(math.floor(c))
                    fr = r - i0
                    fc = c - j0
                    for di in range(2):
                        ii = i0 + di
                        if ii < 0 or ii >= side:
                            continue
                        wr = fr if di == 1 else 1.0 - fr
                        for dj in range(2):
                            jj = j0 + dj
                            if jj < 0 or jj >= side:
                                continue
                            wc = fc if dj == 1 else 1.0 - fc
                            w = wr * wc * step
                            for b in range(nb):
                                out[b, a, k] += w * img[b, ii, jj]
        return out

    @numba.njit(cache=True)
    def _adjoint_numba(sino, cos, sin, det, taus, step, origin, side):
        nb, na, nd = sino.shape
        ns = taus.shape[0]
        out = np.zeros((nb, side, side))
        for a in range(na):
            ca = cos[a]
            sa = sin[a]
            for k in range(nd):
                u = det[k]
                for j in range(ns):
                    t = taus[j]
                    r = origin + u * sa + t * ca
                    c = origin + u * ca - t * sa
                    i0 = int(math.floor(r))
                    j0 = int(math.floor(c))
                    fr = r - i0
                    fc = c - j0
                    for di in range(2):
                        ii = i0 + di
                        if ii < 0 or ii >= side:
                            continue
                        wr = fr if di == 1 else 1.0 - fr
                        for dj in range(2):
                            jj = j0 + dj
                            if jj < 0 or jj >= side:
                                continue
                            wc = fc if dj == 1 else 1.0 - fc
                            w = wr * wc * step
                            for b in range(nb):
                                out[b, ii, jj] += w * sino[b, a, k]
        return out


def radon_forward(img, cos, sin, det, taus, step, origin, backend=None):
    """Line integrals of a batch of ``(B, s, s)`` images -> ``(B, n_angles, n_det)``."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    if _resolve(backend) == "numba":
        return _forward_numba(img, cos, sin, det, taus, float(step), float(origin))
    return _forward_numpy(img, cos, sin, det, taus, step, origin)


def radon_adjoint(sino, cos, sin, det, taus, step, origin, side, backend=None):
    """Back-projection with the same weights as :func:`radon_forward`."""
    sino = np.ascontiguousarray(sino, dtype=np.float64)
    if _resolve(backend) == "numba":
        return _adjoint_numba(sino, cos, sin, det, taus, float(step), float(origin), int(side))
    return _adjoint_numpy(sino, cos, sin, det, taus, step, origin, side)


# ------------------------------------------------------------ patch extraction

def _im2col_numpy(x, k):
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(k) for j in range(k)], axis=-1)
    return cols.reshape(n * h * w, k * k * c)


if NUMBA_AVAILABLE:

    @numba.njit(cache=True)
    def _im2col_numba(x, k):
        n, h, w, c = x.shape
        p = k // 2
        out = np.empty((n, h, w, k, k, c), dtype=x.dtype)
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    for i in range(k):
                        yy = y + i - p
                        for j in range(k):
                            xj = xx + j - p
                            if yy < 0 or yy >= h or xj < 0 or xj >= w:
                                for cc in range(c):
                                    out[b, y, xx, i, j, cc] = 0.0
                            else:
                                for cc in range(c):
                                    out[b, y, xx, i, j, cc] = x[b, yy, xj, cc]
        return out.reshape(n * h * w, k * k * c)


def im2col(x, k, backend=None):
    """``(N, H, W, C)`` -> ``(N*H*W, k*k*C)`` zero-padded patches, ordered (row, col, channel)."""
    n, h, w, c = x.shape
    if k == 1:
        return x.reshape(n * h * w, c)
    if _resolve(backend) == "numba":
        return _im2col_numba(np.ascontiguousarray(x), k)
    return _im2col_numpy(x, k)
