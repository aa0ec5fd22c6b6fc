"""Named random sub-streams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *keys: int) -> np.random.SeedSequence:
    """Seed sequence for ``(seed, name, *keys)``; stable across processes and platforms."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8")), *(int(k) for k in keys)])


def rng(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(stream(seed, name, *keys))
