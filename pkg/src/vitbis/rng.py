"""Seeded random streams.

All randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence([root_seed, stream_offset, *extra])``. Each purpose gets its
own fixed offset, so e.g. changing the augmentation draws never perturbs
parameter initialization.
"""

from __future__ import annotations

import numpy as np

STREAM_OFFSETS = {
    "init": 1,
    "data": 2,
    "augment": 3,
    "order": 4,
    "split": 5,
}


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    if purpose not in STREAM_OFFSETS:
        raise KeyError(f"unknown rng stream {purpose!r}")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    entropy = [seed, STREAM_OFFSETS[purpose], *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(entropy))


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) redrawn until every sample lies within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
