"""Seed plumbing: every public entry point accepts either a plain int or
an existing numpy SeedSequence."""

import numpy as np


def as_seed_sequence(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def spawn(seed, n):
    return as_seed_sequence(seed).spawn(n)
