"""Reconstruction quality metrics: MSE, data misfit, SSIM, PSNR."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(x_true, x_rec) -> float:
    a, b = _pair(x_true, x_rec)
    return float(np.mean((a - b) ** 2))


def psnr(x_true, x_rec) -> float:
    """``-10 log10(MSE)`` for images in [0, 1]; ``inf`` for a perfect match."""
    m = mse(x_true, x_rec)
    return math.inf if m == 0.0 else -10.0 * math.log10(m)


def misfit_metric(op, x_rec, b) -> tuple[float, float]:
    """``(0.5 * sum((A x - b)**2), same / number of data entries)``."""
    ax = op.apply(np.asarray(x_rec, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    if ax.shape != b.shape:
        raise ShapeError(f"A x has shape {ax.shape}, data has {b.shape}")
    r = ax - b
    raw = 0.5 * float(np.sum(r * r))
    return raw, raw / r.size


def _gauss_window():
    x = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-x ** 2 / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    n = g.size
    h, w = img.shape
    rows = np.stack([img[i:h - n + 1 + i, :] for i in range(n)], axis=0)
    tmp = np.tensordot(g, rows, axes=(0, 0))
    cols = np.stack([tmp[:, j:w - n + 1 + j] for j in range(n)], axis=0)
    return np.tensordot(g, cols, axes=(0, 0))


def _ssim_2d(a, b):
    if min(a.shape) < SSIM_WIN:
        warnings.warn(f"image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window; "
                      "using global statistics", stacklevel=3)
        mu_a, mu_b = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = np.mean((a - mu_a) * (b - mu_b))
    else:
        g = _gauss_window()
        mu_a = _filter_valid(a, g)
        mu_b = _filter_valid(b, g)
        va = _filter_valid(a * a, g) - mu_a ** 2
        vb = _filter_valid(b * b, g) - mu_b ** 2
        cov = _filter_valid(a * b, g) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
         / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (va + vb + SSIM_C2)))
    return float(np.mean(s))


def ssim(x_true, x_rec) -> float:
    """Gaussian-windowed SSIM (11x11, width 1.5) over valid windows, averaged over channels."""
    a, b = _pair(x_true, x_rec)
    if a.min() < 0.0 or a.max() > 1.0 or b.min() < 0.0 or b.max() > 1.0:
        warnings.warn("SSIM inputs outside [0, 1] were clamped", stacklevel=2)
        a = np.clip(a, 0.0, 1.0)
        b = np.clip(b, 0.0, 1.0)
    if a.ndim == 2:
        return _ssim_2d(a, b)
    if a.ndim == 3:
        return float(np.mean([_ssim_2d(a[c], b[c]) for c in range(a.shape[0])]))
    raise ShapeError(f"ssim expects H x W or C x H x W, got {a.shape}")


@dataclass
class MetricReport:
    mse: float
    misfit: float
    misfit_normalized: float
    ssim: float
    psnr: float

    FIELDS = ("mse", "misfit", "misfit_normalized", "ssim", "psnr")

    def row(self):
        return [getattr(self, f) for f in self.FIELDS]


def evaluate(op, x_true, x_rec, b) -> MetricReport:
    raw, norm = misfit_metric(op, x_rec, b)
    return MetricReport(mse(x_true, x_rec), raw, norm, ssim(x_true, x_rec), psnr(x_true, x_rec))


def aggregate(values) -> tuple[float, float]:
    """Mean and (population) standard deviation; ``inf`` entries propagate."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(np.isinf(v)):
        return (math.inf, 0.0) if np.all(v == math.inf) else (math.inf, math.nan)
    return float(v.mean()), float(v.std())
