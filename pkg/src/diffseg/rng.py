"""Splittable seeding.

Every random stream in the package is derived from one 64-bit seed and a
tuple of non-negative integer stream ids::

    rng = stream(seed, STREAM_DATA, split_id, index)

The pair is fed to :class:`numpy.random.SeedSequence` as
``entropy=seed, spawn_key=ids``, so streams with different ids are
statistically independent and any stream can be recreated in isolation
(parallel generation stays reproducible).
"""

from __future__ import annotations

import zlib

import numpy as np

STREAM_DATA = 1
STREAM_ORACLE = 2
STREAM_TRAIN = 3
STREAM_INIT = 4
STREAM_REFINE = 5
STREAM_BASE = 6


def stream(seed: int, *ids: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(i) for i in ids)))


def name_id(name: str) -> int:
    """Stable stream id for a string key (e.g. a sample's relative path)."""
    return zlib.crc32(name.encode("utf-8"))
