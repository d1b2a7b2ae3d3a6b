"""Keyed random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, purpose, *indices)``. A given draw therefore depends only
on where it happens (step, batch slot, sample index, ensemble draw) and never
on how many draws happened before it, which is what makes resumed runs and
ensemble sweeps reproducible.
"""

import numpy as np

INIT = 1
BATCH = 2
MASK = 3
AUGMENT = 4
EVAL = 5
SYNTH = 6
SIGNATURE = 7
CHECK = 8


def stream(seed: int, purpose: int, *indices: int) -> np.random.Generator:
    entropy = [int(seed), int(purpose), *(int(i) for i in indices)]
    if any(v < 0 for v in entropy):
        raise ValueError(f"rng keys must be non-negative, got {entropy}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
