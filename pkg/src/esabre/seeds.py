"""Deterministic RNG stream derivation.

All randomness in the package flows from a single 64-bit seed.  Streams are
derived with ``numpy.random.SeedSequence`` spawn keys, so any component can
be re-run in isolation and reproduce the exact draws of a full run.

Stream key layout (first element of the spawn key):

====  =======================================
 0    sampler chains, keyed by chain index
 1    simulation generators
 2    cross-validation fold assignment
 3    model-spec enumeration (one per spec)
 4    shard partitioning
 5    prior-power (no-data) sampling
 6    scratch streams for tests/benchmarks
====  =======================================
"""

from __future__ import annotations

import numpy as np

STREAM_CHAIN = 0
STREAM_SIMULATE = 1
STREAM_CV = 2
STREAM_SELECT = 3
STREAM_SHARD = 4
STREAM_PRIOR = 5
STREAM_SCRATCH = 6


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for stream ``key`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))
