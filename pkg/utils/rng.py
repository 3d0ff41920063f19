"""Random stream helpers.

Particles own independent generators derived from ``(seed, step, stage, i)``
so batched and chunked computations draw identical numbers.
"""

from typing import List, Sequence, Union

import numpy as np

RandomSource = Union[np.random.Generator, Sequence[np.random.Generator]]

# spawn-key stages
STAGE_PREDICT = 0
STAGE_RESAMPLE = 1
STAGE_PROPAGATE = 2
STAGE_BASELINE = 3
STAGE_PPC = 4
STAGE_FORECAST = 5


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for one (seed, key...) stream"""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def particle_streams(seed: int, step: int, stage: int, n: int) -> List[np.random.Generator]:
    """One generator per particle for a given step and stage"""
    return [stream(seed, step, stage, i) for i in range(n)]


def standard_normal(rng: RandomSource, shape) -> np.ndarray:
    """Standard normal draws; with a list of generators row i comes from rng[i]"""
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (int(shape),)
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)

    if len(shape) < 2 or shape[0] != len(rng):
        raise ValueError(f"{len(rng)} generators cannot fill an array of shape {shape}")
    return np.stack([g.standard_normal(shape[1:]) for g in rng])
