"""Named random sub-streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    return zlib.crc32(str(k).encode("utf-8"))


def derive_seed(root: int, *keys) -> int:
    """A 32-bit seed that depends only on ``root`` and the key path."""
    ss = np.random.SeedSequence(root, spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1)[0])


def stream(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(root, spawn_key=tuple(_key(k) for k in keys)))
