"""Misfit-augmented flow-matching objective, Adam, and the training loop."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import make_rng
from .errors import ConfigError, FormatError, TrainingError
from .flow import antithetic_batch, inject_noise, interpolate
from .io import deserialize_tensor, tensor_bytes
from .model import ModelConfig, VelocityModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dawnfm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    alpha: float = 1.0
    lr_init: float = 1e-4
    lr_min: float = 1e-6
    max_epochs: int = 200
    batch_size: int = 64
    p_low: float = 0.0
    p_high: float = 20.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # fixed data range for the noise rule; None means per-sample range of A x1
    reference_range: float | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not (0.0 <= self.p_low < self.p_high <= 20.0):
            raise ConfigError("need 0 <= p_low < p_high <= 20")
        if self.lr_min > self.lr_init:
            raise ConfigError("lr_min must not exceed lr_init")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr_init`` at epoch 0 to ``lr_min`` at ``max_epochs``."""
    frac = min(max(epoch, 0), cfg.max_epochs) / cfg.max_epochs
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class LossBreakdown:
    total: float
    velocity_term: float
    misfit_term: float


@dataclass
class TrainBatch:
    x1: np.ndarray
    x0: np.ndarray
    t: np.ndarray
    b: np.ndarray
    noise_level: np.ndarray  # p/100 per sample, what the model is conditioned on


def _col(a, ndim):
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def compute_loss(model, op, batch: TrainBatch, alpha: float = 1.0, grad: bool = True):
    """Velocity term + ``alpha`` * misfit term and, optionally, parameter gradients.

    velocity term: mean of ``(v_hat + x0 - x1)**2``
    misfit term:   mean of ``(A x_t + (1 - t) A v_hat - b)**2``

    Returns ``(LossBreakdown, grads)``; ``grads`` is None when ``grad`` is off.
    """
    t = np.asarray(batch.t, dtype=np.float64)
    x_t = interpolate(batch.x0, batch.x1, t).x_t
    bt = op.adjoint(batch.b)
    cond = batch.noise_level if model.config.noise_conditioning else None
    v_hat = model.forward(x_t, bt, t, cond, record=grad)
    if not np.all(np.isfinite(v_hat)):
        raise TrainingError(f"non-finite velocity prediction (t range {t.min():.3g}..{t.max():.3g})")
    r1 = v_hat + batch.x0 - batch.x1
    one_minus_t = _col(1.0 - t, batch.b.ndim)
    b_theta = op.apply(x_t) + one_minus_t * op.apply(v_hat)
    r2 = b_theta - batch.b
    l1 = float(np.mean(r1 * r1))
    l2 = float(np.mean(r2 * r2))
    loss = LossBreakdown(l1 + alpha * l2, l1, l2)
    if not math.isfinite(loss.total):
        raise TrainingError(f"non-finite loss: velocity={l1} misfit={l2}")
    if not grad:
        return loss, None
    up = (2.0 / r1.size) * r1
    if alpha != 0.0:
        up = up + alpha * _col(1.0 - t, up.ndim) * op.adjoint((2.0 / r2.size) * r2)
    grads, _ = model.backward(up)
    return loss, grads


def make_batch(x1_unique, op, cfg: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    """Antithetic pairs sharing their ``t``, ``p`` and data noise draws."""
    x1, x0 = antithetic_batch(x1_unique, rng)
    n = x1_unique.shape[0]
    t = rng.uniform(0.0, 1.0, size=n)
    p = rng.uniform(cfg.p_low, cfg.p_high, size=n)
    obs = inject_noise(op, x1_unique, p, rng, reference_range=cfg.reference_range)
    twice = lambda a: np.concatenate([a, a], axis=0)  # noqa: E731
    return TrainBatch(x1, x0, twice(t), twice(obs.b), twice(p / 100.0))


class Trainer:
    """Owns model, optimiser state and loss history for one training run.

    The random stream of epoch ``e`` is derived from ``(seed, e)``, so a run
    resumed from a checkpoint replays exactly what the unbroken run would do.
    """

    def __init__(self, model: VelocityModel, op, dataset: np.ndarray, cfg: TrainConfig):
        if dataset.shape[0] == 0:
            raise TrainingError("empty dataset")
        self.model = model
        self.op = op
        self.dataset = np.asarray(dataset, dtype=model.dtype)
        self.cfg = cfg
        self.opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.eps)
        self.epoch = 0
        self.history: list[dict] = []
        self.step_losses: list[float] = []
        self.lr_override: float | None = None
        self.metadata: dict = {}

    def train_epoch(self) -> LossBreakdown:
        cfg = self.cfg
        rng = make_rng(cfg.seed, 1, self.epoch)
        lr = cosine_lr(self.epoch, cfg) if self.lr_override is None else self.lr_override
        order = rng.permutation(self.dataset.shape[0])
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, order.size, cfg.batch_size):
            batch = make_batch(self.dataset[order[start:start + cfg.batch_size]], self.op, cfg, rng)
            loss, grads = compute_loss(self.model, self.op, batch, cfg.alpha)
            self.opt.step(self.model.params, grads, lr)
            self.step_losses.append(loss.velocity_term)
            sums += (loss.total, loss.velocity_term, loss.misfit_term)
            n_batches += 1
        mean = LossBreakdown(*(sums / n_batches))
        self.history.append({"epoch": self.epoch, "lr": lr, "total": mean.total,
                             "velocity": mean.velocity_term, "misfit": mean.misfit_term})
        self.epoch += 1
        return mean

    def run(self, until_epoch: int | None = None, callback=None) -> list[dict]:
        until = self.cfg.max_epochs if until_epoch is None else until_epoch
        while self.epoch < until:
            loss = self.train_epoch()
            log.info("epoch %d total=%.6g velocity=%.6g misfit=%.6g",
                     self.epoch - 1, loss.total, loss.velocity_term, loss.misfit_term)
            if callback is not None:
                callback(self)
        return self.history

    # ------------------------------------------------------------ persistence
    def save(self, path) -> Path:
        return save_checkpoint(path, self)

    @classmethod
    def restore(cls, path, op, dataset) -> "Trainer":
        return load_checkpoint(path, op, dataset)


def _tensor_entries(trainer: Trainer):
    for k, v in trainer.model.params.items():
        yield f"params/{k}", v
    for k, v in trainer.opt.m.items():
        yield f"adam_m/{k}", v
    for k, v in trainer.opt.v.items():
        yield f"adam_v/{k}", v


def save_checkpoint(path, trainer: Trainer) -> Path:
    """Write ``manifest.json`` plus one DWNT file per parameter and Adam moment."""
    path = Path(path)
    entries = []
    for name, arr in _tensor_entries(trainer):
        rel = f"{name}.dwnt"
        blob = tensor_bytes(arr)
        (path / rel).parent.mkdir(parents=True, exist_ok=True)
        (path / rel).write_bytes(blob)
        entries.append({"name": name, "file": rel, "shape": list(arr.shape),
                        "dtype": str(arr.dtype), "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": trainer.model.config.to_dict(),
        "train_config": trainer.cfg.to_dict(),
        "optimizer": {"name": "adam", "step": trainer.opt.t, "beta1": trainer.opt.beta1,
                      "beta2": trainer.opt.beta2, "eps": trainer.opt.eps},
        "epoch": trainer.epoch,
        "rng": {"seed": trainer.cfg.seed, "stream": "(seed, 1, epoch)", "next_epoch": trainer.epoch},
        "history": trainer.history,
        "metadata": trainer.metadata,
        "step_losses": trainer.step_losses,
        "tensors": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise FormatError(f"{path}: no manifest.json")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mf}: corrupt manifest ({exc})") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{mf}: not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{mf}: checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    return manifest


def load_tensors(path, manifest) -> dict:
    path = Path(path)
    out = {}
    for e in manifest["tensors"]:
        f = path / e["file"]
        if not f.exists():
            raise FormatError(f"checkpoint entry {e['name']!r}: missing file {f}")
        blob = f.read_bytes()
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise FormatError(f"checkpoint entry {e['name']!r}: checksum mismatch")
        arr = deserialize_tensor(f)
        if list(arr.shape) != e["shape"]:
            raise FormatError(f"checkpoint entry {e['name']!r}: shape {arr.shape} != {e['shape']}")
        out[e["name"]] = arr
    return out


def load_model(path) -> VelocityModel:
    manifest = read_manifest(path)
    tensors = load_tensors(path, manifest)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    names = [e["name"][len("params/"):] for e in manifest["tensors"] if e["name"].startswith("params/")]
    params = {k: tensors[f"params/{k}"].copy() for k in names}
    return VelocityModel(cfg, params)


def load_checkpoint(path, op, dataset) -> Trainer:
    manifest = read_manifest(path)
    tensors = load_tensors(path, manifest)
    model = load_model(path)
    trainer = Trainer(model, op, dataset, TrainConfig.from_dict(manifest["train_config"]))
    for k in model.params:
        for slot, store in (("adam_m", trainer.opt.m), ("adam_v", trainer.opt.v)):
            key = f"{slot}/{k}"
            if key not in tensors:
                raise FormatError(f"checkpoint entry {key!r} missing from manifest")
            store[k] = tensors[key].copy()
    trainer.opt.t = int(manifest["optimizer"]["step"])
    trainer.epoch = int(manifest["epoch"])
    trainer.history = list(manifest["history"])
    trainer.step_losses = list(manifest["step_losses"])
    trainer.metadata = dict(manifest.get("metadata", {}))
    return trainer
