"""Named random sub-streams derived from a single run seed.

Every source of randomness (init, shuffle, augment, noise, canary) gets its
own stream so that components can be replayed independently.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("init", "shuffle", "augment", "noise", "canary", "data")


def stream_id(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def seed_sequence(seed: int, name: str, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(stream_id(name), *map(int, path)))


def substream(seed: int, name: str, *path: int) -> np.random.Generator:
    """Generator for sub-stream ``name`` (optionally indexed by ``path``)."""
    return np.random.default_rng(seed_sequence(seed, name, *path))


def derive_seed(seed: int, name: str, *path: int) -> int:
    """A 64-bit integer seed for sub-stream ``name``."""
    return int(seed_sequence(seed, name, *path).generate_state(1, np.uint64)[0])
