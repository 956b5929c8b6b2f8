"""
Seed derivation for independent random streams
"""
import os

import numpy as np

from constants import SEED_ENV_VARIABLE

# stream identifiers mixed into derived seeds
PERMUTATION_STREAM = 1
DROPOUT_STREAM = 2
AUGMENT_STREAM = 3
INIT_STREAM = 4
SPLIT_STREAM = 5
BASIS_STREAM = 6


def derive_seed(*keys: int) -> int:
    """
    Hashes a tuple of non-negative integers into one 32-bit seed.
    The same keys always give the same seed, on every platform.
    """
    return int(np.random.SeedSequence([int(key) for key in keys]).generate_state(1)[0])


def default_seed(fallback: int = 0) -> int:
    """
    Seed from the FCAP_SEED environment variable, or the fallback
    """
    value = os.environ.get(SEED_ENV_VARIABLE)
    if value is None or not value.strip():
        return fallback
    return int(value)
