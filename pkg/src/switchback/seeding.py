"""Order-independent seed derivation.

``mix64`` folds any number of integer or string keys into one 64-bit seed
using the SplitMix64 finalizer::

    h = splitmix(seed)
    for key in keys:
        h = splitmix(h ^ splitmix(key_as_int))

Strings are hashed with BLAKE2b (8-byte digest) so results do not depend on
``PYTHONHASHSEED``.  The same keys always give the same seed, regardless of
the order in which replications execute.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _as_int(key: int | str) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    return int(key) & MASK64


def mix64(seed: int, *keys: int | str) -> int:
    h = splitmix64(_as_int(seed))
    for key in keys:
        h = splitmix64(h ^ splitmix64(_as_int(key)))
    return h


def rng(seed: int, *keys: int | str) -> np.random.Generator:
    """A numpy generator seeded from ``mix64(seed, *keys)``."""
    return np.random.default_rng(mix64(seed, *keys))
