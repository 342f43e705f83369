"""Binary checkpoint format.

Layout (little-endian)::

    magic      5 bytes   b"NMDL1"
    version    uint32    FORMAT_VERSION
    config     7 x uint64  n_layers, n_heads, d_model, vocab_size,
                           max_seq_len, rng_seed, precision
    n_arrays   uint32
    per array, in param_shapes() order:
        ndim   uint32
        dims   ndim x uint64
        data   prod(dims) x float64

A JSON copy of the config is written next to the binary for inspection.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import ModelConfig, NanoModel, param_shapes

MAGIC = b"NMDL1"
FORMAT_VERSION = 1
_CONFIG_FIELDS = ("n_layers", "n_heads", "d_model", "vocab_size", "max_seq_len", "rng_seed", "precision")


def _pack(model: NanoModel) -> bytes:
    cfg = model.config
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<7Q", *(int(getattr(cfg, f)) for f in _CONFIG_FIELDS)))
    shapes = param_shapes(cfg)
    parts.append(struct.pack("<I", len(shapes)))
    for name, shape in shapes:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(model: NanoModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = _pack(model)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    meta = path.with_name(path.name + ".json")
    meta.write_text(json.dumps(dict(model.config.to_dict(), format_version=FORMAT_VERSION), indent=2, sort_keys=True) + "\n")
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> NanoModel:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic bytes")
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    values = r.unpack("<7Q")
    try:
        cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, (int(v) for v in values))))
    except ValueError as exc:
        raise CheckpointFormatError(f"invalid config header: {exc}") from exc
    shapes = param_shapes(cfg)
    (count,) = r.unpack("<I")
    if count != len(shapes):
        raise CheckpointShapeError(f"header implies {len(shapes)} arrays, file declares {count}")
    params = {}
    for name, expected in shapes:
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q") if ndim else ()
        if tuple(dims) != expected:
            raise CheckpointShapeError(f"{name}: file shape {tuple(dims)} conflicts with header shape {expected}")
        size = int(np.prod(expected)) * 8
        params[name] = np.frombuffer(r.take(size), dtype="<f8").reshape(expected).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointFormatError("trailing bytes after last array")
    return NanoModel(cfg, params)
