"""Named deterministic random substreams.

Every run derives all randomness from one root seed. Independent concerns
(data generation, splitting, weight init, task sampling, ...) pull from
named substreams so that changing one consumer never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK32 = 0xFFFFFFFF


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK32
    # stable across processes/platforms (unlike hash())
    return zlib.crc32(str(part).encode("utf-8")) & _MASK32


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for the substream identified by (seed, *names)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream_int(seed: int, *names) -> int:
    """A derived 32-bit seed, for APIs that take a plain integer seed."""
    return int(substream(seed, *names).integers(0, 2**31 - 1))
