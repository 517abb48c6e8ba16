"""Seed derivation for replicates, grid points and search candidates."""
from __future__ import annotations

import numpy as np


def replicate_seed(master: int, *keys: int) -> int:
    """
    Independent 32-bit seed for (master, *keys).

    Derived through numpy's SeedSequence, so replicate r at grid point g
    gets the same seed wherever it runs (worker pool or serial loop).
    """
    entropy = [int(master)] + [int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))
