"""Forward maps ``A`` and their adjoints.

Every operator accepts either a single element of its domain or a batch
with arbitrary leading axes, e.g. ``(B, 1, s, s)`` images for an operator
whose domain is ``(s, s)``.
"""
from __future__ import annotations

import math

import numpy as np

from . import _kernels
from .core import make_rng
from .errors import ParameterError, ShapeError


class LinearOperator:
    """Base class: subclasses implement ``_apply`` / ``_adjoint`` on flat batches."""

    name = "linear"

    def __init__(self, domain_shape, range_shape):
        self.domain_shape = tuple(domain_shape)
        self.range_shape = tuple(range_shape)

    def _split(self, x, core_shape, what):
        x = np.asarray(x, dtype=np.float64)
        k = len(core_shape)
        if x.ndim < k or x.shape[x.ndim - k:] != core_shape:
            raise ShapeError(f"{self.name} {what}: expected trailing shape {core_shape}, got {x.shape}")
        lead = x.shape[:x.ndim - k]
        return x.reshape((-1,) + core_shape), lead

    def apply(self, x):
        flat, lead = self._split(x, self.domain_shape, "apply")
        return self._apply(flat).reshape(lead + self.range_shape)

    def adjoint(self, y):
        flat, lead = self._split(y, self.range_shape, "adjoint")
        return self._adjoint(flat).reshape(lead + self.domain_shape)

    __call__ = apply

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError


class DenseOperator(LinearOperator):
    """Explicit matrix acting on flattened vectors."""

    name = "dense"

    def __init__(self, matrix, domain_shape=None, range_shape=None):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ShapeError("DenseOperator needs a 2D matrix")
        super().__init__(domain_shape or (matrix.shape[1],), range_shape or (matrix.shape[0],))
        if math.prod(self.domain_shape) != matrix.shape[1] or math.prod(self.range_shape) != matrix.shape[0]:
            raise ShapeError("matrix size does not match domain/range shapes")
        self.matrix = matrix

    def _apply(self, x):
        return x.reshape(x.shape[0], -1) @ self.matrix.T

    def _adjoint(self, y):
        return y.reshape(y.shape[0], -1) @ self.matrix


class SumOperator(LinearOperator):
    """``b = x1 + x2``; the adjoint copies ``b`` into both slots."""

    name = "sum"

    def __init__(self):
        super().__init__((2,), (1,))

    def _apply(self, x):
        return x.sum(axis=1, keepdims=True)

    def _adjoint(self, y):
        return np.repeat(y, 2, axis=1)


def blur_build_kernel(side: int, sigma_x: float = 3.0, sigma_y: float = 3.0) -> np.ndarray:
    """Gaussian PSF in FFT layout (origin at ``[0, 0]``), normalised to unit sum.

    The exponent is ``-dx**2/sigma_x**2 - dy**2/sigma_y**2`` (no factor 2).
    """
    if side < 1:
        raise ParameterError(f"side must be >= 1, got {side}")
    if not (sigma_x > 0 and sigma_y > 0):
        raise ParameterError(f"blur widths must be positive, got ({sigma_x}, {sigma_y})")
    idx = np.arange(side)
    off = np.where(idx <= side // 2, idx, idx - side).astype(np.float64)
    dy = off[:, None]
    dx = off[None, :]
    k = np.exp(-dx ** 2 / sigma_x ** 2 - dy ** 2 / sigma_y ** 2)
    return k / k.sum()


class GaussianBlurOperator(LinearOperator):
    """Periodic convolution with a Gaussian PSF, computed in the Fourier domain."""

    name = "blur"

    def __init__(self, side: int, sigma_x: float = 3.0, sigma_y: float = 3.0):
        super().__init__((side, side), (side, side))
        self.side = int(side)
        self.sigma_x = float(sigma_x)
        self.sigma_y = float(sigma_y)
        self.kernel = blur_build_kernel(side, sigma_x, sigma_y)
        self.kernel_hat = np.fft.fft2(self.kernel)

    def _filter(self, x, khat):
        return np.fft.ifft2(np.fft.fft2(x, axes=(-2, -1)) * khat, axes=(-2, -1)).real

    def _apply(self, x):
        return self._filter(x, self.kernel_hat)

    def _adjoint(self, y):
        return self._filter(y, np.conj(self.kernel_hat))


class RadonOperator(LinearOperator):
    """Parallel-beam projector with bilinear ray sampling.

    The image is zero padded by ``side // 2`` on every side; detectors have
    unit spacing and are centred on the padded grid; angles are uniform on
    ``[0, 180)`` degrees; each ray is sampled with a step of at most half a
    pixel.  Padding is implicit: samples falling outside the unpadded image
    contribute zero, which is the same as projecting the padded image.
    """

    name = "radon"

    def __init__(self, side: int, n_angles: int = 360, backend: str | None = None):
        if side < 1 or n_angles < 1:
            raise ParameterError("side and n_angles must be >= 1")
        n_det = 2 * side + 1
        super().__init__((side, side), (n_angles, n_det))
        self.side = int(side)
        self.n_angles = int(n_angles)
        self.n_detectors = n_det
        self.pad = side // 2
        self.padded_side = side + 2 * self.pad
        self.backend = backend
        self.angles_deg = np.arange(n_angles) * (180.0 / n_angles)
        theta = np.deg2rad(self.angles_deg)
        self._cos = np.cos(theta)
        self._sin = np.sin(theta)
        self._det = np.arange(n_det, dtype=np.float64) - side
        half = self.padded_side * math.sqrt(2.0) / 2.0
        n_samp = int(math.ceil(2.0 * half / 0.5))
        self.step = 2.0 * half / n_samp
        self._taus = -half + (np.arange(n_samp) + 0.5) * self.step
        # padded centre (P-1)/2 shifted into unpadded index space
        self._origin = (self.padded_side - 1) / 2.0 - self.pad

    def _geom(self):
        return self._cos, self._sin, self._det, self._taus, self.step, self._origin

    def _apply(self, x):
        return _kernels.radon_forward(x, *self._geom(), backend=self.backend)

    def _adjoint(self, y):
        return _kernels.radon_adjoint(y, *self._geom(), self.side, backend=self.backend)


def adjoint_dot_test(op: LinearOperator, rng: np.random.Generator | None = None,
                     trials: int = 20) -> float:
    """Max relative mismatch of ``<Ax, y>`` and ``<x, A^T y>`` over random pairs."""
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    rng = rng if rng is not None else make_rng(0)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.domain_shape)
        y = rng.standard_normal(op.range_shape)
        lhs = float(np.vdot(op.apply(x), y))
        rhs = float(np.vdot(x, op.adjoint(y)))
        worst = max(worst, abs(lhs - rhs) / (abs(lhs) + 1e-300))
    return worst


def top_singular_value(op: LinearOperator, iters: int = 100,
                       rng: np.random.Generator | None = None,
                       history: bool = False):
    """Largest singular value by power iteration on ``A^T A``.

    Returns ``||A v_k||`` for the final normalised iterate, or the whole
    sequence of estimates when ``history`` is set (it is nondecreasing).
    """
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    rng = rng if rng is not None else make_rng(0)
    v = rng.standard_normal(op.domain_shape)
    v /= np.linalg.norm(v)
    estimates = []
    for _ in range(iters):
        av = op.apply(v)
        estimates.append(float(np.linalg.norm(av)))
        w = op.adjoint(av)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            break
        v = w / nrm
    estimates.append(float(np.linalg.norm(op.apply(v))))
    return estimates if history else estimates[-1]


def make_operator(name: str, side: int | None = None, **kw) -> LinearOperator:
    if name == "blur":
        return GaussianBlurOperator(side, kw.get("sigma_x", 3.0), kw.get("sigma_y", 3.0))
    if name == "radon":
        return RadonOperator(side, kw.get("n_angles", 360), kw.get("backend"))
    if name == "sum":
        return SumOperator()
    raise ParameterError(f"unknown operator {name!r}")
