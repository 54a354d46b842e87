"""Seed handling: one explicit generator threaded through everything."""

from __future__ import annotations

import numpy as np


def as_generator(seed):
    """Return ``seed`` if it is already a Generator, else build one."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn(seed, *keys):
    """Derive an independent child generator from (seed, keys)."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return np.random.Generator(np.random.PCG64(ss))
