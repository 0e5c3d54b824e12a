"""Named random streams derived from a single root seed.

Each stream is keyed by a string, so adding a new stream never shifts the
draws of an existing one.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` under ``root_seed``."""
    if root_seed < 0:
        raise ValueError("root seed must be non-negative")
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(stream_key(name),))
    return np.random.default_rng(ss)


def stream_seed(root_seed: int, name: str) -> int:
    """A 63-bit integer seed for APIs that take ints (e.g. ``FlipEnv.reset``)."""
    return int(stream(root_seed, name).integers(0, 2**63 - 1))
