"""Deterministic RNG substreams derived from a single master seed.

Every source of randomness in the library (data generation, parameter
init, output-point sampling, forest construction, loss noise, shuffling)
draws from its own named substream so that components can be re-seeded
independently without perturbing the others.
"""

import numpy as np

# Stable component tags; checkpoint/log reproducibility depends on them.
DATA = 1
INIT = 2
SAMPLING = 3
IFOR = 4
NOISE = 5
SHUFFLE = 6
EVAL = 7

_MASK = (1 << 63) - 1


def substream(seed, *key):
    """Independent generator for the tuple (seed, *key)."""
    entropy = [int(seed) & _MASK] + [int(k) & _MASK for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))
