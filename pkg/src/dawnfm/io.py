"""File formats: DWNT tensors, PGM/PPM rasters, CSV tables."""
from __future__ import annotations

import csv
import math
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"DWNT"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def tensor_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype not in _DTYPE_CODES:
        t = t.astype(np.float64)
    if t.ndim > 255:
        raise ShapeError("too many dimensions for DWNT")
    head = MAGIC + bytes([VERSION, _DTYPE_CODES[t.dtype], t.ndim])
    head += struct.pack(f"<{t.ndim}I", *t.shape)
    return head + np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes()


def tensor_from_bytes(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 7:
        raise FormatError(f"{source}: truncated header ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {data[:4]!r}")
    if data[4] != VERSION:
        raise FormatError(f"{source}: unsupported version {data[4]}")
    if data[5] not in _CODE_DTYPES:
        raise FormatError(f"{source}: unknown dtype code {data[5]}")
    dtype = _CODE_DTYPES[data[5]]
    ndim = data[6]
    end = 7 + 4 * ndim
    if len(data) < end:
        raise FormatError(f"{source}: truncated shape header")
    shape = struct.unpack(f"<{ndim}I", data[7:end])
    need = math.prod(shape) * dtype.itemsize
    if len(data) - end != need:
        raise FormatError(f"{source}: payload has {len(data) - end} bytes, expected {need}")
    arr = np.frombuffer(data, dtype=dtype.newbyteorder("<"), offset=end).reshape(shape)
    return arr.astype(dtype)


def serialize_tensor(t: np.ndarray, path) -> None:
    Path(path).write_bytes(tensor_bytes(t))


def deserialize_tensor(path) -> np.ndarray:
    path = Path(path)
    return tensor_from_bytes(path.read_bytes(), str(path))


def image_bytes(t: np.ndarray) -> bytes:
    """Binary PGM (``H x W``) or PPM (``3 x H x W``), maxval 255, round half up."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 3 and t.shape[0] == 1:
        t = t[0]
    if t.ndim == 2:
        kind, h, w = b"P5", t.shape[0], t.shape[1]
        pix = t
    elif t.ndim == 3 and t.shape[0] == 3:
        kind, h, w = b"P6", t.shape[1], t.shape[2]
        pix = t.transpose(1, 2, 0)
    else:
        raise ShapeError(f"write_image needs H x W or 3 x H x W, got {t.shape}")
    q = np.floor(np.clip(pix, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return kind + f"\n{w} {h}\n255\n".encode() + q.tobytes()


def write_image(t: np.ndarray, path) -> None:
    Path(path).write_bytes(image_bytes(t))


def fmt_float(x) -> str:
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
