"""Seeded random streams.

Every stream is numpy's PCG64 bit generator (PCG XSL RR 128/64), whose output
sequence for a given seed is fixed across platforms. Child streams are
derived with ``SeedSequence`` so that per-image and per-run seeds never
depend on how many draws an earlier consumer made.
"""

from __future__ import annotations

import numpy as np

DEFAULT_SEED = 20190721
ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_check_seed(seed))))


def child_seeds(seed: int, n: int) -> list[int]:
    """``n`` independent 64-bit seeds derived from ``seed``."""
    children = np.random.SeedSequence(_check_seed(seed)).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return seed
