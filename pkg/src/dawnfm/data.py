"""Datasets: IDX files, synthetic ellipse phantoms, the two-lobe duathlon prior."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def parse_idx(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode an unsigned-byte IDX payload.

    Image files (``0x00000803``) are returned as floats divided by 255;
    label files (``0x00000801``) as ``uint8``.
    """
    if len(data) < 4:
        raise FormatError(f"{source}: truncated magic at byte offset 0")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"{source}: unsupported IDX magic 0x{magic:08x} at byte offset 0")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise FormatError(f"{source}: truncated dimension header at byte offset {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:head])
    need = math.prod(dims)
    have = len(data) - head
    if have < need:
        raise FormatError(f"{source}: payload at byte offset {head} has {have} bytes, expected {need}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=head).reshape(dims)
    if magic == IDX_LABELS:
        return raw.copy()
    return raw.astype(np.float64) / 255.0


def load_idx(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return parse_idx(data, str(path))


def gen_phantoms(rng: np.random.Generator, count: int, side: int,
                 max_ellipses: int = 4) -> np.ndarray:
    """Sums of 1..``max_ellipses`` random rotated ellipses, clamped to [0, 1].

    Every ellipse stays at least half a pixel away from the outer row and
    column centres, so the frame border is always zero.
    """
    if side < 8:
        raise ParameterError("phantoms need side >= 8")
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    out = np.zeros((count, side, side))
    for n in range(count):
        img = out[n]
        for _ in range(int(rng.integers(1, max_ellipses + 1))):
            a, b = rng.uniform(0.1 * side, 0.3 * side, size=2)
            phi = rng.uniform(0.0, math.pi)
            c, s = math.cos(phi), math.sin(phi)
            hx = math.sqrt((a * c) ** 2 + (b * s) ** 2)
            hy = math.sqrt((a * s) ** 2 + (b * c) ** 2)
            lo_x, hi_x = hx + 0.5, side - 1 - hx - 0.5
            lo_y, hi_y = hy + 0.5, side - 1 - hy - 0.5
            cx = rng.uniform(lo_x, hi_x)
            cy = rng.uniform(lo_y, hi_y)
            val = rng.uniform(0.2, 1.0)
            dx, dy = xx - cx, yy - cy
            u = (dx * c + dy * s) / a
            v = (-dx * s + dy * c) / b
            img += val * (u * u + v * v <= 1.0)
        np.clip(img, 0.0, 1.0, out=img)
    return out


@dataclass(frozen=True)
class DuathlonPrior:
    means: tuple = ((1.0, 1.0), (3.0, 3.0))
    std: float = 0.25
    weights: tuple = (0.5, 0.5)

    def __post_init__(self):
        if any(w <= 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0):
            raise ParameterError("mixture weights must be positive and sum to 1")
        if self.std <= 0:
            raise ParameterError("component std must be positive")

    def log_density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        comps = []
        for mu, w in zip(self.means, self.weights):
            d2 = np.sum((x - np.asarray(mu)) ** 2, axis=-1)
            comps.append(math.log(w) - d2 / (2 * self.std ** 2) - math.log(2 * math.pi * self.std ** 2))
        return np.logaddexp.reduce(np.stack(comps), axis=0)


def sample_duathlon_prior(rng: np.random.Generator, count: int,
                          prior: DuathlonPrior = DuathlonPrior(), return_labels: bool = False):
    if count < 1:
        raise ParameterError("count must be >= 1")
    cum = np.cumsum(prior.weights)
    comp = np.minimum(np.searchsorted(cum, rng.uniform(size=count), side="right"), len(cum) - 1)
    x = np.asarray(prior.means)[comp] + prior.std * rng.standard_normal((count, 2))
    return (x, comp) if return_labels else x
