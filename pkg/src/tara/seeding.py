"""Namespaced deterministic RNG streams.

Every randomness consumer derives its generator from a master seed plus a
fixed integer tag, so adding a new consumer never shifts the draws of an
existing one.
"""

from __future__ import annotations

import numpy as np

TAG_VOCAB = 1
TAG_BASE_MODEL = 2
TAG_WORLD = 3
TAG_ADAPTER_INIT = 4
TAG_TRAIN_NOISE = 5
TAG_SAMPLER = 6
TAG_REFERENCES = 7


def rng_stream(*keys: int) -> np.random.Generator:
    """Generator for the stream addressed by the given integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
