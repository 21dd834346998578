"""Deterministic seed derivation.

All randomness in a run flows from one top-level integer seed.  Each consumer
(window sampler, parameter init, batch sampler, eval seed k, ...) derives its
own independent stream through a labelled path, so adding or removing draws in
one consumer never shifts another consumer's stream.  Paths are hashed into
numpy SeedSequence spawn keys.
"""

from __future__ import annotations

import zlib

import numpy as np


def _path_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"seed path parts must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"seed path parts must be int or str, got {type(part).__name__}")


def derive_seed(root: int, *path) -> int:
    """Return a 64-bit seed for the consumer identified by `path`."""
    seq = np.random.SeedSequence(root, spawn_key=tuple(_path_key(p) for p in path))
    a, b = seq.generate_state(2, dtype=np.uint64)[:2]
    return int(a) ^ (int(b) << 1) & 0xFFFFFFFFFFFFFFFF


def derive_rng(root: int, *path) -> np.random.Generator:
    """Return an independent numpy Generator for the consumer at `path`."""
    seq = np.random.SeedSequence(root, spawn_key=tuple(_path_key(p) for p in path))
    return np.random.default_rng(seq)
