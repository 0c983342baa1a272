"""Named, reproducible random streams derived from a base seed."""
from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``.

    Streams with different keys are statistically independent, so work split
    by key gives the same numbers whether it runs serially or in parallel.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


# stream keys used across the package
KEY_LATENT = 1
KEY_MIXING = 2
KEY_MASK = 3
KEY_MASK_MLP = 4
KEY_INIT = 5
KEY_TRAIN = 6
KEY_SWEEP = 7
