"""Named random streams derived from one global seed.

Every consumer asks for a stream by a string key, so components can be
re-run in isolation and still draw the same numbers.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, key: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}/{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, key: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, key)))
