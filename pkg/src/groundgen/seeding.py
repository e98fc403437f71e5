"""Named random sub-streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    # crc32 keeps the stream key stable across processes, unlike hash()
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
