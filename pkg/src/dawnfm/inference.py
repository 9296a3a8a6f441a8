"""Fixed-step RK4 sampling of the conditioned flow and ensemble statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import make_rng
from .errors import InferenceError, ParameterError, ShapeError


@dataclass
class InferenceConfig:
    n_steps: int = 100
    ensemble_size: int = 32
    seed: int = 0
    noise_percent: float = 5.0
    chunk: int = 256

    def __post_init__(self):
        if self.n_steps < 1 or self.ensemble_size < 1:
            raise ParameterError("n_steps and ensemble_size must be >= 1")


@dataclass
class PosteriorEnsemble:
    samples: np.ndarray  # (M, *shape)
    mean: np.ndarray
    std: np.ndarray      # per element, 1/M normalisation

    @classmethod
    def from_samples(cls, samples) -> "PosteriorEnsemble":
        samples = np.asarray(samples, dtype=np.float64)
        mean = samples.mean(axis=0)
        std = np.sqrt(np.mean((samples - mean) ** 2, axis=0))
        return cls(samples, mean, std)

    @property
    def spread(self) -> float:
        """Scalar ``1/M sum_j ||x_j - mean||^2`` (sum of per-element variances)."""
        return float(np.sum(self.std ** 2))


def rk4_integrate(field, x0, n_steps: int = 100, t0: float = 0.0, t1: float = 1.0):
    """Classical fourth-order Runge-Kutta with ``n_steps`` equal steps."""
    if n_steps < 1:
        raise ParameterError("n_steps must be >= 1")
    h = (t1 - t0) / n_steps
    x = np.array(x0, dtype=np.float64, copy=True)
    for i in range(n_steps):
        t = t0 + i * h
        k1 = field(x, t)
        k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = field(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = field(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise InferenceError(f"non-finite state after RK4 step {i}")
    return x


def conditioned_field(model, bt, noise_level):
    """``(x, t) -> s(x, E(A^T b), t, sigma)`` with ``A^T b`` and ``sigma`` fixed.

    ``bt`` is broadcast to the batch of states; rows of ``bt`` may differ.
    """
    sigma = noise_level if model.config.noise_conditioning else None

    def field(x, t):
        return model.forward(x, bt, float(t), sigma, record=False)
    return field


def _adjoint_of(op, bs, shape):
    """``A^T b`` for a stack of observations, checked against the model input shape."""
    try:
        bt = op.adjoint(bs)
    except ShapeError as exc:
        raise InferenceError(f"observations do not fit the operator: {exc}") from None
    if bt.shape[1:] != shape:
        raise InferenceError(f"A^T b has shape {bt.shape[1:]}, the model expects {shape}")
    return bt


def posterior_ensemble(model, op, b, cfg: InferenceConfig, stream: int = 0) -> PosteriorEnsemble:
    """Integrate ``M`` independent Gaussian starts to ``t = 1`` for one observation.

    The conditioning noise level is ``cfg.noise_percent / 100``; the draws
    come from the stream ``(cfg.seed, 2, stream)``.
    """
    shape = model.config.input_shape
    bt_one = _adjoint_of(op, np.asarray(b, dtype=np.float64)[None], shape)
    rng = make_rng(cfg.seed, 2, stream)
    x0 = rng.standard_normal((cfg.ensemble_size,) + shape)
    out = np.empty_like(x0)
    for s in range(0, cfg.ensemble_size, cfg.chunk):
        blk = x0[s:s + cfg.chunk]
        bt = np.repeat(bt_one, blk.shape[0], axis=0)
        out[s:s + cfg.chunk] = rk4_integrate(conditioned_field(model, bt, cfg.noise_percent / 100.0), blk, cfg.n_steps)
    return PosteriorEnsemble.from_samples(out)


def posterior_ensembles(model, op, bs, cfg: InferenceConfig, first_stream: int = 0):
    """Ensembles for several observations, integrated together in chunks.

    Observation ``i`` draws its starts from stream ``first_stream + i``,
    exactly as :func:`posterior_ensemble` would.
    """
    bs = np.asarray(bs, dtype=np.float64)
    shape = model.config.input_shape
    m = cfg.ensemble_size
    x0 = np.concatenate([make_rng(cfg.seed, 2, first_stream + i).standard_normal((m,) + shape)
                         for i in range(bs.shape[0])], axis=0)
    bt_all = np.repeat(_adjoint_of(op, bs, shape), m, axis=0)
    out = np.empty_like(x0)
    for s in range(0, x0.shape[0], cfg.chunk):
        field = conditioned_field(model, bt_all[s:s + cfg.chunk], cfg.noise_percent / 100.0)
        out[s:s + cfg.chunk] = rk4_integrate(field, x0[s:s + cfg.chunk], cfg.n_steps)
    return [PosteriorEnsemble.from_samples(out[i * m:(i + 1) * m]) for i in range(bs.shape[0])]
