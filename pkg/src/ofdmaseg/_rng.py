"""Seed plumbing shared by every stochastic stage.

All randomness goes through numpy's Philox4x32 counter-based bit generator.
Child seeds are derived with ``SeedSequence`` hashing, so a root seed plus a
tuple of integer keys (sample index, stage id, ...) names one stream.
"""

import numpy as np

# stage ids used as derivation keys
STAGE_PARTITION = 1
STAGE_BITS = 2
STAGE_IMPAIR = 3
STAGE_FADING = 4
STAGE_NOISE = 5
STAGE_SPLIT = 6


def derive_seed(*keys: int) -> int:
    """Hash a tuple of non-negative integers into a 63-bit seed."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.Generator(np.random.Philox(int(seed)))
