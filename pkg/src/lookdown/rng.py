"""Seed splitting.

Every random input of a run is drawn from its own PCG64 stream, addressed by
a spawn key under the run's root seed::

    (replica, NEUTRAL, j)      arrows into level j (rate j-1)
    (replica, POTENTIAL, i)    potential atoms at level i
    (replica, BROWNIAN)        Brownian increments on the dt_s grid
    (replica, BRIDGE)          Brownian-bridge fill-ins between grid points
    (replica, INIT)            initial type configuration
    (replica, DIRECT)          increments of the original-timescale SDE
    (replica, SAMPLING)        level subsampling for matrix samples

Keying the event streams per level makes a run on n levels see exactly the
atoms that a run on n' > n levels sees on its first n levels, and both runs
share the same Brownian grid.
"""

from __future__ import annotations

import numpy as np

NEUTRAL = 0
POTENTIAL = 1
BROWNIAN = 2
BRIDGE = 3
INIT = 4
DIRECT = 5
SAMPLING = 6


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``seed`` and the spawn key ``key``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.default_rng(seed)
