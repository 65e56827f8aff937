"""Keyed seed derivation.

Every random stream in the package is derived from one master seed plus a
tuple of keys, so adding a stage (or a target, or a shadow) never shifts the
randomness of any other stage.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *keys: object) -> int:
    """Return a 63-bit seed that depends only on ``master`` and ``keys``."""
    h = hashlib.sha256(str(int(master)).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


def rng_for(master: int, *keys: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
