"""Counter-based random streams keyed by integer tuples.

A stream for ``(seed, trial, substream)`` is the same no matter which worker
asks for it or in which order, which is what makes parallel Monte Carlo runs
reproducible.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator for the key path ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
