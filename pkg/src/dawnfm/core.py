"""Array conventions, seeded random streams and the 2D DFT."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float64


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *stream)``.

    Streams with different ids are statistically independent (SeedSequence
    spawn keys), and the same ``(seed, stream)`` always yields the same draws.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def _check_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: need at least one axis, all extents >= 1")
    return shape


def sample_standard_normal(rng: np.random.Generator, shape: int | Sequence[int],
                           dtype=DEFAULT_DTYPE) -> np.ndarray:
    shape = _check_shape(shape)
    return rng.standard_normal(shape).astype(dtype, copy=False)


def fft2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """2D DFT of a single ``H x W`` array.

    Forward is unscaled and the inverse carries ``1/(H*W)``, so
    ``sum|x|^2 == sum|fft2(x)|^2 / (H*W)``.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"fft2 expects a 2D array, got shape {x.shape}")
    return np.fft.ifft2(x) if inverse else np.fft.fft2(x)
