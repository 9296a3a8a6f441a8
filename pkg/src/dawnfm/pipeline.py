"""End-to-end workflows shared by the CLI and the acceptance suite."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .core import make_rng
from .data import DuathlonPrior, gen_phantoms, load_idx, sample_duathlon_prior
from .errors import ConfigError, FormatError, ShapeError
from .flow import inject_noise
from .inference import InferenceConfig, posterior_ensembles
from .metrics import MetricReport, aggregate, evaluate
from .model import ModelConfig, VelocityModel
from .operators import LinearOperator, make_operator, top_singular_value, adjoint_dot_test
from .training import Trainer, TrainConfig, load_checkpoint, load_model, read_manifest

log = logging.getLogger(__name__)

# stream ids for make_rng(seed, STREAM, ...)
_TRAIN_DATA, _TEST_DATA, _OBS_NOISE = 11, 12, 3


# ------------------------------------------------------------------ building
def build_operator(cfg: ExperimentConfig) -> LinearOperator:
    o = cfg.operator
    if cfg.task == "deblur":
        return make_operator("blur", cfg.dataset.side, sigma_x=o.sigma_x, sigma_y=o.sigma_y)
    if cfg.task == "tomo":
        return make_operator("radon", cfg.dataset.side, n_angles=o.n_angles)
    return make_operator("sum")


def _as_images(x, cfg: ExperimentConfig, source):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    want = (cfg.dataset.channels, cfg.dataset.side, cfg.dataset.side)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeError(f"{source}: images of shape {x.shape[1:]}, expected {want}")
    return x


def load_split(cfg: ExperimentConfig, split: str) -> np.ndarray:
    """Training or test set as ``(N, C, s, s)`` (or ``(N, 2)`` for the duathlon)."""
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    d = cfg.dataset
    n = d.n_train if split == "train" else d.n_test
    stream = _TRAIN_DATA if split == "train" else _TEST_DATA
    if d.kind == "duathlon-prior":
        return sample_duathlon_prior(make_rng(d.seed, stream), n)
    if d.kind == "synthetic-phantoms":
        imgs = gen_phantoms(make_rng(d.seed, stream), n, d.side)[:, None]
        if d.channels != 1:
            imgs = np.repeat(imgs, d.channels, axis=1)
        return imgs
    path = d.train_path if split == "train" else (d.test_path or d.train_path)
    x = load_idx(path)
    if split == "test" and not d.test_path:
        x = x[d.n_train:]
    return _as_images(x[:n], cfg, path)


def make_model(cfg: ExperimentConfig) -> VelocityModel:
    return VelocityModel(cfg.model)


# ------------------------------------------------------------------- training
def _loss_rows(history):
    return [[h["epoch"], h["lr"], h["total"], h["velocity"], h["misfit"]] for h in history]


def train_experiment(cfg: ExperimentConfig, out, resume=None, stop_after: int | None = None,
                     checkpoint_every: int = 0) -> Trainer:
    """Train (or resume) and write ``checkpoint/``, ``config.json``, ``losses.csv``
    and the held-out split as ``test.dwnt``.

    ``stop_after`` ends the run early at that epoch count, leaving a checkpoint
    that ``resume`` can continue from.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    op = build_operator(cfg)
    train = load_split(cfg, "train")
    if resume is not None:
        trainer = load_checkpoint(resume, op, train)
        saved = trainer.metadata.get("experiment")
        if saved is not None and ExperimentConfig.from_dict(saved).to_dict() != cfg.to_dict():
            raise ConfigError(f"{resume}: checkpoint was trained with a different config")
    else:
        trainer = Trainer(make_model(cfg), op, train, cfg.train)
    trainer.metadata = {"experiment": cfg.to_dict()}
    (out / "config.json").write_text(cfg.dumps())
    io.serialize_tensor(load_split(cfg, "test"), out / "test.dwnt")
    ckpt = out / "checkpoint"

    def on_epoch(t):
        if checkpoint_every and t.epoch % checkpoint_every == 0:
            t.save(ckpt)

    until = cfg.train.max_epochs if stop_after is None else min(stop_after, cfg.train.max_epochs)
    trainer.run(until, on_epoch)
    trainer.save(ckpt)
    io.write_csv(out / "losses.csv", ["epoch", "lr", "total", "velocity", "misfit"],
                 _loss_rows(trainer.history))
    return trainer


def experiment_of_checkpoint(path) -> ExperimentConfig:
    meta = read_manifest(path).get("metadata", {})
    if "experiment" not in meta:
        raise FormatError(f"{path}: checkpoint carries no experiment config")
    return ExperimentConfig.from_dict(meta["experiment"])


# ------------------------------------------------------------------ inference
def load_images(path) -> np.ndarray:
    """A DWNT tensor or an IDX file of images, as a float64 array."""
    path = Path(path)
    head = path.read_bytes()[:4]
    if head == b"DWNT":
        return io.deserialize_tensor(path).astype(np.float64)
    return load_idx(path)


def _unit(a):
    lo, hi = float(a.min()), float(a.max())
    return np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)


def _input_panel(b, task):
    """Observed data as an image; sinograms are channel-averaged and rescaled to [0, 1]."""
    b = np.asarray(b, dtype=np.float64)
    if task == "tomo":
        return _unit(b.mean(axis=0))
    return b


def infer_images(checkpoint, truth, noise_pct: float, ensemble: int, seed: int, out,
                 n_steps: int = 100, chunk: int = 256) -> dict:
    """Synthesize noisy data for ``truth`` and sample the posterior of each image.

    Writes stacked ``truth/data/adjoint/mean/std`` tensors plus one set of
    panels per image under ``panels/``.
    """
    out = Path(out)
    (out / "panels").mkdir(parents=True, exist_ok=True)
    cfg = experiment_of_checkpoint(checkpoint)
    op = build_operator(cfg)
    model = load_model(checkpoint)
    truth = np.asarray(truth, dtype=np.float64)
    if cfg.task != "duathlon":
        truth = _as_images(truth, cfg, "input")
    elif truth.ndim != 2 or truth.shape[1:] != op.domain_shape:
        raise ShapeError(f"input {truth.shape} does not match the operator domain {op.domain_shape}")
    # each image is passed as a batch of one so its range spans all channels
    bs = np.concatenate([inject_noise(op, truth[i:i + 1], noise_pct, make_rng(seed, _OBS_NOISE, i),
                                      reference_range=cfg.train.reference_range).b
                         for i in range(truth.shape[0])])
    icfg = InferenceConfig(n_steps=n_steps, ensemble_size=ensemble, seed=seed,
                           noise_percent=noise_pct, chunk=chunk)
    ens = posterior_ensembles(model, op, bs, icfg)
    mean = np.stack([e.mean for e in ens])
    std = np.stack([e.std for e in ens])
    adj = op.adjoint(bs)
    for name, arr in (("truth", truth), ("data", bs), ("adjoint", adj), ("mean", mean), ("std", std)):
        io.serialize_tensor(arr, out / f"{name}.dwnt")
    if cfg.task != "duathlon":
        c = cfg.dataset.channels
        for i in range(truth.shape[0]):
            stem = out / "panels" / f"img_{i:04d}"
            ext = "ppm" if c == 3 else "pgm"
            io.write_image(_input_panel(bs[i], cfg.task),
                           f"{stem}_input.{'pgm' if cfg.task == 'tomo' else ext}")
            io.write_image(adj[i], f"{stem}_adjoint.{ext}")
            io.write_image(mean[i], f"{stem}_mean.{ext}")
            smax = float(std[i].max())
            io.write_image(std[i] / smax if smax > 0 else std[i], f"{stem}_std.{ext}")
            io.write_image(truth[i], f"{stem}_truth.{ext}")
    info = {
        "checkpoint_manifest_sha256": hashlib.sha256((Path(checkpoint) / "manifest.json").read_bytes()).hexdigest(),
        "noise_percent": noise_pct, "ensemble": ensemble, "seed": seed,
        "n_steps": n_steps, "count": int(truth.shape[0]), "task": cfg.task,
    }
    (out / "info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return {"truth": truth, "data": bs, "adjoint": adj, "mean": mean, "std": std, "ensembles": ens}


# ------------------------------------------------------------------ evaluation
def _tensor_in(path, names):
    path = Path(path)
    if path.is_file():
        return io.deserialize_tensor(path)
    for n in names:
        if (path / n).exists():
            return io.deserialize_tensor(path / n)
    raise FormatError(f"{path}: none of {list(names)} found")


def operator_from_path(path) -> LinearOperator:
    """Operator from a checkpoint directory or an experiment config JSON file."""
    p = Path(path)
    if p.is_dir():
        return build_operator(experiment_of_checkpoint(p))
    return build_operator(ExperimentConfig.load(p))


def evaluate_dirs(pred, truth, op: LinearOperator, csv_path=None) -> list[MetricReport]:
    """Per-image metrics of ``pred`` against ``truth``, with mean/std footer rows.

    The misfit uses the observed data saved next to the predictions when
    available and noise-free ``A x_true`` otherwise.
    """
    x_rec = _tensor_in(pred, ("mean.dwnt",)).astype(np.float64)
    x_true = _tensor_in(truth, ("truth.dwnt",)).astype(np.float64)
    if x_rec.shape != x_true.shape:
        raise ShapeError(f"prediction {x_rec.shape} vs truth {x_true.shape}")
    data = None
    for d in (pred, truth):
        d = Path(d)
        if d.is_dir() and (d / "data.dwnt").exists():
            data = io.deserialize_tensor(d / "data.dwnt")
            break
    if data is None:
        log.warning("no data.dwnt found; misfit is measured against noise-free A x_true")
        data = op.apply(x_true)
    reports = [evaluate(op, x_true[i], x_rec[i], data[i]) for i in range(x_true.shape[0])]
    if csv_path is not None:
        rows = [[i] + r.row() for i, r in enumerate(reports)]
        cols = list(zip(*[r.row() for r in reports]))
        stats = [aggregate(c) for c in cols]
        rows.append(["mean"] + [s[0] for s in stats])
        rows.append(["std"] + [s[1] for s in stats])
        io.write_csv(csv_path, ["image"] + list(MetricReport.FIELDS), rows)
    return reports


def edge_band(img, width: int = 2, tol: float = 1e-6) -> np.ndarray:
    """Pixels within ``width`` (chessboard distance) of an intensity edge.

    A pixel is an edge pixel when a 4-neighbour differs from it by more
    than ``tol``. Multi-channel inputs are averaged first.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=0)
    edge = np.zeros(a.shape, dtype=bool)
    dv = np.abs(np.diff(a, axis=0)) > tol
    dh = np.abs(np.diff(a, axis=1)) > tol
    edge[:-1] |= dv
    edge[1:] |= dv
    edge[:, :-1] |= dh
    edge[:, 1:] |= dh
    band = edge.copy()
    padded = np.pad(edge, width)
    h, w = a.shape
    for dy in range(-width, width + 1):
        for dx in range(-width, width + 1):
            band |= padded[width + dy:width + dy + h, width + dx:width + dx + w]
    return band


# ------------------------------------------------------------------- duathlon
def duathlon_config(seed: int = 0, epochs: int = 150, n_train: int = 8192) -> ExperimentConfig:
    """Frozen toy setup: noise-informed mlp, 64 steps per epoch."""
    prior_train = sample_duathlon_prior(make_rng(seed, _TRAIN_DATA), n_train)
    ref = float(np.ptp(prior_train.sum(axis=1)))
    from .config import DatasetConfig
    return ExperimentConfig(
        task="duathlon",
        dataset=DatasetConfig(kind="duathlon-prior", side=1, n_train=n_train, n_test=1000, seed=seed),
        model=ModelConfig.default_for((2,), "mlp", seed=seed),
        train=TrainConfig(lr_init=2e-3, lr_min=1e-5, max_epochs=epochs, batch_size=128,
                          seed=seed, reference_range=ref),
        output_dir="runs/duathlon",
    )


def rejection_posterior(b: float, sigma: float, n_draws: int, rng,
                        prior: DuathlonPrior = DuathlonPrior()) -> np.ndarray:
    """Exact posterior draws for ``b = x1 + x2 + N(0, sigma^2)`` by rejection."""
    x = sample_duathlon_prior(rng, n_draws, prior)
    r = b - x.sum(axis=1)
    keep = rng.uniform(size=n_draws) < np.exp(-0.5 * (r / sigma) ** 2)
    return x[keep]


def toy_duathlon(b: float, noise_pct: float, samples: int, out, seed: int = 0,
                 epochs: int = 150, checkpoint=None, oracle_draws: int = 1_000_000) -> dict:
    """Train (or load) the toy model, sample the posterior for ``b``, compare to the oracle."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if checkpoint is None:
        cfg = duathlon_config(seed, epochs)
        trainer = train_experiment(cfg, out / "train")
        model, checkpoint = trainer.model, out / "train" / "checkpoint"
    else:
        cfg = experiment_of_checkpoint(checkpoint)
        model = load_model(checkpoint)
    op = build_operator(cfg)
    sigma = noise_pct / 100.0 * cfg.train.reference_range
    icfg = InferenceConfig(ensemble_size=samples, seed=seed, noise_percent=noise_pct)
    ens = posterior_ensembles(model, op, np.array([[b]]), icfg)[0]
    prior = DuathlonPrior()
    centers = np.asarray(prior.means)
    right = int(np.argmin(np.abs(centers.sum(axis=1) - b)))
    dist = np.linalg.norm(ens.samples[:, None, :] - centers[None], axis=2)
    frac = float(np.mean(np.argmin(dist, axis=1) == right))
    oracle = rejection_posterior(b, sigma, oracle_draws, make_rng(seed, 21)) if sigma > 0 else None
    prior_draws, labels = sample_duathlon_prior(make_rng(seed, 22), samples, prior, return_labels=True)
    io.write_csv(out / "prior.csv", ["x1", "x2", "component"],
                 [[float(p[0]), float(p[1]), int(c)] for p, c in zip(prior_draws, labels)])
    io.write_csv(out / "posterior.csv", ["x1", "x2"], [[float(p[0]), float(p[1])] for p in ens.samples])
    summary = {
        "b": b, "noise_percent": noise_pct, "sigma": sigma, "samples": samples, "seed": seed,
        "correct_lobe": centers[right].tolist(), "fraction_in_correct_lobe": frac,
        "ensemble_mean": ens.mean.tolist(), "ensemble_std": ens.std.tolist(),
        "checkpoint": str(checkpoint),
    }
    if oracle is not None and oracle.shape[0]:
        io.write_csv(out / "oracle_posterior.csv", ["x1", "x2"],
                     [[float(p[0]), float(p[1])] for p in oracle[:samples]])
        summary["oracle_mean"] = oracle.mean(axis=0).tolist()
        summary["oracle_std"] = oracle.std(axis=0).tolist()
        summary["oracle_accepted"] = int(oracle.shape[0])
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    summary["ensemble"] = ens
    return summary


# ------------------------------------------------------------------- op-test
def operator_report(name: str, side: int = 16, trials: int = 20, seed: int = 0) -> dict:
    op = make_operator(name, side)
    rng = make_rng(seed, 31)
    dot = adjoint_dot_test(op, rng, trials)
    x, y = rng.standard_normal((2,) + op.domain_shape)
    a, c = rng.standard_normal(2)
    lin = float(np.max(np.abs(op.apply(a * x + c * y) - (a * op.apply(x) + c * op.apply(y)))))
    rep = {"operator": name, "side": None if name == "sum" else side,
           "domain_shape": list(op.domain_shape), "range_shape": list(op.range_shape),
           "dot_test": dot, "linearity": lin,
           "top_singular_value": top_singular_value(op, iters=100, rng=rng)}
    if name == "blur":
        rep["max_abs_kernel_hat"] = float(np.max(np.abs(op.kernel_hat)))
    rep["ok"] = bool(dot < 1e-9 and lin < 1e-9 and math.isfinite(rep["top_singular_value"]))
    return rep
