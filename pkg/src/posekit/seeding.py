"""Deterministic RNG derivation.

All stochastic operations take an explicit ``numpy.random.Generator``.
Batch work derives one independent stream per item from (seed, item index),
so results never depend on worker count or scheduling order.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, key...) — stable across platforms."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
