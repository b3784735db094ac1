"""Named, seedable random streams.

Every random quantity is drawn from a stream keyed by (seed, purpose, block),
so a block of traces gets the same numbers no matter how work is scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np

BLOCK = 4096


def purpose_id(purpose: str) -> int:
    return zlib.crc32(purpose.encode("ascii"))


def stream(seed: int, purpose: str, block: int = 0) -> np.random.Generator:
    if seed is None:
        raise ValueError("a seed is required; entropy-seeded runs are not reproducible")
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(purpose_id(purpose), int(block)))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(int(rng), "user")


def blocks(n: int, size: int = BLOCK):
    """Yield (block_index, start, stop) covering range(n)."""
    for b, start in enumerate(range(0, n, size)):
        yield b, start, min(n, start + size)
