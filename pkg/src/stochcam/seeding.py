"""Seed handling: signed/unsigned normalization and stream derivation.

One experiment seed fans out into independent streams (init, shuffle, masks,
data, inference) through a documented splitter, so every run artifact is
reproducible bit-for-bit from a single integer.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# stream ids for the experiment-seed splitter
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_MASKS = 2
STREAM_DATA_TRAIN = 3
STREAM_DATA_EVAL = 4
STREAM_INFER = 5


def as_uint64(seed: int) -> np.uint64:
    """Reduce any Python int to its 64-bit two's-complement value."""
    return np.uint64(int(seed) & _MASK64)


def rng_from(seed: int) -> np.random.Generator:
    return np.random.default_rng(as_uint64(seed))


def derive_seed(experiment_seed: int, stream: int) -> int:
    """Derive an independent child seed for one named stream.

    Uses numpy's SeedSequence over the (experiment_seed, stream) pair, which
    is stable across runs and platforms.
    """
    ss = np.random.SeedSequence([int(stream), int(experiment_seed) & _MASK64])
    lo, hi = ss.generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)
