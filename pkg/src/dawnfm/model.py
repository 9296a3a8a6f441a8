"""Conditional velocity estimators ``s(x_t, E(A^T b), t, sigma)``.

Two variants share one parameter/embedding scheme:

* ``unet``: residual UNet; time, noise and data embeddings are added to the
  feature maps at every level (encoder and decoder side).
* ``mlp``: small fully connected net for low-dimensional toy problems.

Parameters live in a plain ordered ``dict`` of arrays.  Every parameter is
initialised from its own random stream keyed by ``(seed, name)``, so two
configurations that share a parameter name also share its initial value.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .core import make_rng
from .errors import ConfigError, ParameterError, ShapeError, StateError

ParameterSet = dict  # name -> ndarray, insertion ordered


@dataclass
class ModelConfig:
    variant: str = "unet"
    input_shape: tuple = (1, 28, 28)
    widths: tuple = (1, 16, 32)
    embed_dim: int = 256
    noise_conditioning: bool = True
    hidden: tuple = (64, 64, 64)
    data_channels: int | None = None
    embed_max_freq: float = 30.0
    noise_scale: float = 5.0
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.widths = tuple(int(w) for w in self.widths)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.variant not in ("unet", "mlp"):
            raise ConfigError(f"variant must be 'unet' or 'mlp', got {self.variant!r}")
        if self.embed_dim <= 0 or self.embed_dim % 2:
            raise ConfigError("embed_dim must be a positive even number")
        if self.variant == "unet":
            if len(self.input_shape) != 3:
                raise ConfigError("unet input_shape must be (C, H, W)")
            if len(self.widths) < 2:
                raise ConfigError("unet needs at least two widths")
            if self.widths[0] != self.input_shape[0]:
                raise ConfigError(f"first width {self.widths[0]} must equal channel count {self.input_shape[0]}")
            div = 2 ** (len(self.widths) - 2)
            if self.input_shape[1] % div or self.input_shape[2] % div:
                raise ConfigError(f"spatial extents must be divisible by {div} for {len(self.widths)} levels")
        elif len(self.input_shape) != 1:
            raise ConfigError("mlp input_shape must be (n,)")

    @property
    def n_levels(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_shape", "widths", "hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def default_for(cls, input_shape, variant="unet", **kw) -> "ModelConfig":
        """Widths ``[c, 16, 32]`` up to side 32, ``[c, 16, 32, 64, 128]`` above."""
        input_shape = tuple(input_shape)
        if variant == "mlp":
            kw.setdefault("embed_dim", 32)
            return cls(variant="mlp", input_shape=input_shape, widths=(), **kw)
        c, side = input_shape[0], input_shape[1]
        widths = (c, 16, 32) if side <= 32 else (c, 16, 32, 64, 128)
        return cls(variant=variant, input_shape=input_shape, widths=kw.pop("widths", widths), **kw)


# ---------------------------------------------------------------- embeddings

@dataclass
class ScalarEmbedding:
    """Fixed sinusoidal features followed by a learnable two-layer map."""

    embed_dim: int
    max_freq: float = 30.0
    scale: float = 1.0
    freqs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        half = self.embed_dim // 2
        self.freqs = np.exp(np.linspace(0.0, math.log(self.max_freq), half))

    def features(self, value) -> np.ndarray:
        v = np.atleast_1d(np.asarray(value, dtype=np.float64))
        if np.any(np.isnan(v)):
            raise ParameterError("embedding input is NaN")
        ang = (self.scale * v)[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------- parameters

def _param_shapes(cfg: ModelConfig) -> dict:
    e = cfg.embed_dim
    shapes = {}
    sites = ["time"] + (["noise"] if cfg.noise_conditioning else [])
    for s in sites:
        shapes[f"emb.{s}.w1"] = (e, e)
        shapes[f"emb.{s}.b1"] = (e,)
        shapes[f"emb.{s}.w2"] = (e, e)
        shapes[f"emb.{s}.b2"] = (e,)
    if cfg.variant == "mlp":
        n = cfg.input_shape[0]
        shapes["enc.w"] = (n, n)
        shapes["enc.b"] = (n,)
        fan = 2 * n + e * len(sites)
        for i, h in enumerate(cfg.hidden):
            shapes[f"mlp.{i}.w"] = (h, fan)
            shapes[f"mlp.{i}.b"] = (h,)
            fan = h
        shapes["mlp.out.w"] = (n, fan)
        shapes["mlp.out.b"] = (n,)
        return shapes

    c = cfg.widths[0]
    feat = cfg.widths[1:]
    dch = cfg.data_channels or feat[0]
    shapes["enc.w"] = (dch, c, 3, 3)
    shapes["enc.b"] = (dch,)

    def cond(tag, ch):
        for s in sites:
            shapes[f"{tag}.{s}_proj.w"] = (ch, e)
            shapes[f"{tag}.{s}_proj.b"] = (ch,)
        shapes[f"{tag}.data_proj.w"] = (ch, dch, 1, 1)
        shapes[f"{tag}.data_proj.b"] = (ch,)

    def res(tag, ch):
        for j in (1, 2):
            shapes[f"{tag}.conv{j}.w"] = (ch, ch, 3, 3)
            shapes[f"{tag}.conv{j}.b"] = (ch,)

    shapes["in.w"] = (feat[0], c, 3, 3)
    shapes["in.b"] = (feat[0],)
    cond("enc0", feat[0])
    res("enc0.res", feat[0])
    for k in range(1, len(feat)):
        shapes[f"down{k}.w"] = (feat[k], feat[k - 1], 3, 3)
        shapes[f"down{k}.b"] = (feat[k],)
        cond(f"enc{k}", feat[k])
        res(f"enc{k}.res", feat[k])
    for k in range(len(feat) - 1, 0, -1):
        shapes[f"up{k}.w"] = (feat[k - 1], feat[k], 3, 3)
        shapes[f"up{k}.b"] = (feat[k - 1],)
        shapes[f"merge{k}.w"] = (feat[k - 1], 2 * feat[k - 1], 3, 3)
        shapes[f"merge{k}.b"] = (feat[k - 1],)
        cond(f"dec{k - 1}", feat[k - 1])
        res(f"dec{k - 1}.res", feat[k - 1])
    shapes["out.w"] = (c, feat[0], 3, 3)
    shapes["out.b"] = (c,)
    return shapes


def init_params(cfg: ModelConfig) -> ParameterSet:
    """Fan-in scaled uniform weights, zero biases."""
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = math.prod(shape[1:])
        bound = 1.0 / math.sqrt(fan_in)
        rng = make_rng(cfg.seed, zlib.crc32(name.encode()))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in _param_shapes(cfg).values())


# ---------------------------------------------------------------- the model

class VelocityModel:
    """Velocity network with a recorded forward pass for reverse-mode gradients."""

    def __init__(self, config: ModelConfig, params: ParameterSet | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        expected = _param_shapes(config)
        if list(self.params) != list(expected):
            raise ConfigError("parameter names do not match the model configuration")
        for k, s in expected.items():
            if self.params[k].shape != tuple(s):
                raise ShapeError(f"parameter {k}: shape {self.params[k].shape} != {tuple(s)}")
        self.time_embedding = ScalarEmbedding(config.embed_dim, config.embed_max_freq, 1.0)
        self.noise_embedding = ScalarEmbedding(config.embed_dim, config.embed_max_freq, config.noise_scale)
        self._tape = None

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    # ---- helpers building graph nodes
    def _embed(self, site, value, leaves, batch):
        emb = self.time_embedding if site == "time" else self.noise_embedding
        feats = emb.features(value)
        if feats.shape[0] == 1 and batch > 1:
            feats = np.repeat(feats, batch, axis=0)
        h = ad.linear(ad.const(feats.astype(self.dtype)), leaves[f"emb.{site}.w1"], leaves[f"emb.{site}.b1"])
        return ad.linear(ad.silu(h), leaves[f"emb.{site}.w2"], leaves[f"emb.{site}.b2"])

    def embed_scalar(self, site: str, value) -> np.ndarray:
        """Learned embedding of ``t`` (site ``'time'``) or ``sigma`` (``'noise'``)."""
        leaves = {k: ad.const(v) for k, v in self.params.items()}
        if site not in ("time", "noise") or (site == "noise" and not self.config.noise_conditioning):
            raise ConfigError(f"model has no {site!r} embedding")
        return self._embed(site, value, leaves, np.size(value)).value

    def encode_data(self, bt) -> np.ndarray:
        """Data encoder: one 3x3 convolution (unet) or one affine map (mlp)."""
        bt = self._check_input(bt, "A^T b")
        leaves = {k: ad.const(v) for k, v in self.params.items()}
        return self._external(self._encode(ad.const(self._internal(bt)), leaves).value)

    def _encode(self, bt, leaves):
        if self.config.variant == "mlp":
            return ad.linear(bt, leaves["enc.w"], leaves["enc.b"])
        return ad.conv2d(bt, leaves["enc.w"], leaves["enc.b"])

    # images are channels-first outside and channels-last inside the graph
    def _internal(self, x):
        if self.config.variant == "mlp":
            return x
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1))

    def _external(self, x):
        if self.config.variant == "mlp":
            return x
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    def _check_input(self, x, what):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.config.input_shape:
            raise ShapeError(f"{what}: expected (B, {self.config.input_shape}), got {x.shape}")
        return x

    def _cond(self, h, tag, temb, semb, data_lvl, leaves):
        ch = h.value.shape[-1]
        bias = ad.linear(temb, leaves[f"{tag}.time_proj.w"], leaves[f"{tag}.time_proj.b"])
        if semb is not None:
            bias = ad.add(bias, ad.linear(semb, leaves[f"{tag}.noise_proj.w"], leaves[f"{tag}.noise_proj.b"]))
        h = ad.add(h, ad.reshape(bias, (-1, 1, 1, ch)))
        return ad.add(h, ad.conv2d(data_lvl, leaves[f"{tag}.data_proj.w"], leaves[f"{tag}.data_proj.b"]))

    def _res(self, h, tag, leaves):
        r = ad.conv2d(ad.silu(h), leaves[f"{tag}.conv1.w"], leaves[f"{tag}.conv1.b"])
        r = ad.conv2d(ad.silu(r), leaves[f"{tag}.conv2.w"], leaves[f"{tag}.conv2.b"])
        return ad.add(h, r)

    def _graph(self, x, bt, t, sigma, leaves):
        cfg = self.config
        batch = x.value.shape[0]
        temb = self._embed("time", t, leaves, batch)
        semb = self._embed("noise", sigma, leaves, batch) if cfg.noise_conditioning else None
        data = self._encode(bt, leaves)
        if cfg.variant == "mlp":
            parts = [x, data, temb] + ([semb] if semb is not None else [])
            h = ad.concat(parts, axis=1)
            for i in range(len(cfg.hidden)):
                h = ad.silu(ad.linear(h, leaves[f"mlp.{i}.w"], leaves[f"mlp.{i}.b"]))
            return ad.linear(h, leaves["mlp.out.w"], leaves["mlp.out.b"])

        n_feat = cfg.n_levels - 1
        data_lv = [data]
        for _ in range(1, n_feat):
            data_lv.append(ad.avg_pool2(data_lv[-1]))
        h = ad.conv2d(x, leaves["in.w"], leaves["in.b"])
        h = self._res(self._cond(h, "enc0", temb, semb, data_lv[0], leaves), "enc0.res", leaves)
        skips = [h]
        for k in range(1, n_feat):
            h = ad.conv2d(ad.avg_pool2(h), leaves[f"down{k}.w"], leaves[f"down{k}.b"])
            h = self._res(self._cond(h, f"enc{k}", temb, semb, data_lv[k], leaves), f"enc{k}.res", leaves)
            skips.append(h)
        for k in range(n_feat - 1, 0, -1):
            h = ad.conv2d(ad.upsample2(h), leaves[f"up{k}.w"], leaves[f"up{k}.b"])
            h = ad.conv2d(ad.concat([h, skips[k - 1]], axis=-1), leaves[f"merge{k}.w"], leaves[f"merge{k}.b"])
            h = self._res(self._cond(h, f"dec{k - 1}", temb, semb, data_lv[k - 1], leaves), f"dec{k - 1}.res", leaves)
        return ad.conv2d(ad.silu(h), leaves["out.w"], leaves["out.b"])

    def _prepare(self, x_t, bt, t, sigma):
        x_t = self._check_input(x_t, "x_t")
        bt = self._check_input(bt, "A^T b")
        if bt.ndim == 1 or bt.shape[0] != x_t.shape[0]:
            raise ShapeError("x_t and A^T b batch sizes differ")
        if self.config.noise_conditioning and sigma is None:
            raise ConfigError("noise-informed model needs a noise level")
        if not self.config.noise_conditioning and sigma is not None:
            raise ConfigError("noise-blind model was given a noise level")
        for name, val in (("t", t), ("sigma", sigma)):
            if val is not None and np.size(val) not in (1, x_t.shape[0]):
                raise ShapeError(f"{name} must be a scalar or one value per sample")
        return self._internal(x_t), self._internal(bt)

    def forward(self, x_t, bt, t, sigma=None, record: bool = True) -> np.ndarray:
        """Predicted velocity for a batch.

        ``bt`` is ``A^T b`` (the encoder runs inside, so its parameters
        receive gradients).  ``sigma`` is the conditioning noise level and
        must be given exactly when the model is noise-informed.  With
        ``record`` the computation is kept for :meth:`backward`.
        """
        x_t, bt = self._prepare(x_t, bt, t, sigma)
        if record:
            leaves = {k: ad.leaf(v) for k, v in self.params.items()}
            x_var = ad.leaf(x_t)
        else:
            leaves = {k: ad.const(v) for k, v in self.params.items()}
            x_var = ad.const(x_t)
        out = self._graph(x_var, ad.const(bt), t, sigma, leaves)
        self._tape = (out, leaves, x_var) if record else None
        return self._external(out.value)

    __call__ = forward

    def backward(self, upstream):
        """Gradients of ``<upstream, v_hat>`` for the last recorded forward pass.

        Returns ``(grads, grad_x_t)`` where ``grads`` mirrors :attr:`params`.
        The tape is consumed.
        """
        if self._tape is None:
            raise StateError("backward called without a recorded forward pass")
        out, leaves, x_var = self._tape
        self._tape = None
        upstream = self._internal(np.asarray(upstream, dtype=out.value.dtype))
        if upstream.shape != out.value.shape:
            raise ShapeError(f"upstream shape {upstream.shape} does not match the model output")
        ad.backward(out, upstream)
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}
        gx = x_var.grad if x_var.grad is not None else np.zeros_like(x_var.value)
        return grads, self._external(gx)
