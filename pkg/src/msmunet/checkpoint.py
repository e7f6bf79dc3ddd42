"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"MSMU" | version | len, config text (utf-8) | tensor count |
    per tensor: len, name | rank | dims... | float32 LE payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_io
from .data import atomic_write_bytes

MAGIC = b"MSMU"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    tensors: dict[str, np.ndarray]

    @property
    def config(self) -> config_io.TrainConfig:
        return config_io.parse(self.config_text)


def encode(config_text: str, tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    text = config_text.encode("utf-8")
    out += [struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    text = r.take(r.u32()).decode("utf-8")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    return Checkpoint(text, tensors)


def save(path, model, train_config: config_io.TrainConfig) -> None:
    tensors = {name: p.data for name, p in model.named_parameters()}
    atomic_write_bytes(Path(path), encode(config_io.serialize(train_config), tensors))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def load_into(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``model`` (f32 values widened to the model dtype)."""
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.assign(arr.astype(p.data.dtype))
