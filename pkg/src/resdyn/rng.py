"""Deterministic seeded RNG streams.

Counter-based Philox generators keyed by (seed, purpose tags) so every
pipeline stage draws from its own reproducible stream regardless of call
order elsewhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def seeded_rng(seed: int, *tags) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
