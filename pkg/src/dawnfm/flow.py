"""Linear interpolation paths, velocity targets and training-data synthesis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class InterpolantSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float
    x_t: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class NoisyObservation:
    b: np.ndarray
    sigma: float | np.ndarray
    p: float | np.ndarray


def _check_t(t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ParameterError(f"t must lie in [0, 1], got {t}")
    return t_arr


def _per_sample(t_arr, ndim):
    # broadcast a scalar or (B,) array of times against a (B, ...) batch
    if t_arr.ndim == 0:
        return t_arr
    return t_arr.reshape(t_arr.shape + (1,) * (ndim - t_arr.ndim))


def interpolate(x0, x1, t) -> InterpolantSample:
    """``x_t = (1 - t) x0 + t x1`` and ``v = x1 - x0``.

    ``t`` may be a scalar or one time per leading batch entry.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"x0 {x0.shape} and x1 {x1.shape} differ")
    tt = _per_sample(_check_t(t), x0.ndim)
    x_t = (1.0 - tt) * x0 + tt * x1
    return InterpolantSample(x0, x1, t, x_t, x1 - x0)


def recover_x1(x_t, v_hat, t) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if x_t.shape != v_hat.shape:
        raise ShapeError(f"x_t {x_t.shape} and v_hat {v_hat.shape} differ")
    tt = _per_sample(_check_t(t), x_t.ndim)
    return x_t + (1.0 - tt) * v_hat


def data_range(clean, batched: bool) -> np.ndarray | float:
    """``max - min`` of the clean data, per sample (first axis) when batched."""
    if not batched:
        return float(clean.max() - clean.min())
    flat = clean.reshape(clean.shape[0], -1)
    return flat.max(axis=1) - flat.min(axis=1)


def inject_noise(op, x1, p, rng: np.random.Generator, reference_range=None) -> NoisyObservation:
    """``b = A x1 + sigma z`` with ``sigma = p/100 * range(A x1)``.

    ``x1`` is one domain element or a batch along the first axis (extra
    axes such as channels are part of each sample), with a scalar ``p`` or
    one per sample.  ``reference_range`` replaces the data range; it is
    needed when each datum is a single number (the duathlon sum), whose own
    range is zero.  A constant clean signal gives ``sigma = 0``.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(p_arr < 0.0) or np.any(p_arr > 20.0):
        raise ParameterError(f"noise percent must lie in [0, 20], got {p}")
    x1 = np.asarray(x1, dtype=np.float64)
    batched = x1.ndim > len(op.domain_shape)
    clean = op.apply(x1)
    spread = data_range(clean, batched) if reference_range is None else float(reference_range)
    sigma = p_arr / 100.0 * np.asarray(spread)
    if batched:
        sigma = np.broadcast_to(sigma, (clean.shape[0],)).copy()
    elif sigma.ndim:
        raise ShapeError("one p per sample needs a batched x1")
    if np.all(sigma == 0.0):
        return NoisyObservation(clean, sigma if batched else float(sigma), p)
    z = rng.standard_normal(clean.shape)
    b = clean + _per_sample(sigma, clean.ndim) * z
    return NoisyObservation(b, sigma if batched else float(sigma), p)


def antithetic_batch(x1_batch, rng: np.random.Generator):
    """Duplicate ``x1`` and pair each Gaussian draw with its negation.

    Returns ``(x1, x0)`` of batch size ``2B`` with ``x0 = [z; -z]``.
    """
    x1_batch = np.asarray(x1_batch, dtype=np.float64)
    if x1_batch.ndim == 0 or x1_batch.shape[0] == 0:
        raise ShapeError("antithetic_batch needs a non-empty batch")
    z = rng.standard_normal(x1_batch.shape)
    return (np.concatenate([x1_batch, x1_batch], axis=0),
            np.concatenate([z, -z], axis=0))
