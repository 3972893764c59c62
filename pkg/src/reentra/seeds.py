"""Derive independent, reproducible sub-seeds from one master seed."""

import zlib

import numpy as np


def sub_seed(seed: int, *tags: str | int) -> int:
    """Return a 63-bit seed that depends only on ``seed`` and the tag path."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for tag in tags:
        words.append(zlib.crc32(str(tag).encode()) if isinstance(tag, str) else int(tag))
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def rng_for(seed: int, *tags: str | int) -> np.random.Generator:
    return np.random.default_rng(sub_seed(seed, *tags))
