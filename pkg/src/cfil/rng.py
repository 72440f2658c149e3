"""Seeded random streams.

All randomness goes through numpy's PCG64 bit generator, which yields the
same stream for the same seed on every platform numpy supports. Derived
streams are keyed by a tuple of integers via ``SeedSequence`` so that, for
example, the batch order of epoch 7 does not depend on how many draws
earlier epochs made.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "numpy-PCG64"
MAX_SEED = 2**64 - 1


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for ``seed``, optionally narrowed to a named sub-stream."""
    entropy = [check_seed(seed), *[int(s) for s in stream]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# sub-stream keys; fixed so that adding a consumer never shifts another
STREAM_INIT = 1
STREAM_BACKBONE = 2
STREAM_DECODER = 3
STREAM_FAMILIES = 4
STREAM_FOLDS = 5
STREAM_PAIRS = 6
STREAM_EPOCH = 7
STREAM_GRADCHECK = 8
