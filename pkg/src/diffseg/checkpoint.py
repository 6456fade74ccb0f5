"""Binary tensor container shared by denoiser and segmentor checkpoints.

Layout (all integers little-endian u32)::

    magic bytes ("DDPSCKPT" or "DDPSSEG")
    version
    config length, config bytes (UTF-8 JSON)
    tensor count
    per tensor: name length, name bytes, rank, dims..., float32 data
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

VERSION = 1
DENOISER_MAGIC = b"DDPSCKPT"
SEGMENTOR_MAGIC = b"DDPSSEG"


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or unsupported container version."""


def write_container(path, magic: bytes, config: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    parts = [magic, struct.pack("<I", VERSION)]
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a whole container; nothing is returned unless every tensor is intact."""
    r = _Reader(Path(path).read_bytes())
    got = r.data[: len(magic)]
    if got != magic:
        raise CheckpointVersionError(f"bad magic {got!r}, expected {magic!r}")
    r.take(len(magic))
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    try:
        config = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after last tensor")
    return config, tensors
