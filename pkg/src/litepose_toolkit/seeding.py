"""
Named random streams derived from a single integer seed.

Every subsystem asks for its own stream by name so that drawing numbers in
one place (e.g. weight initialisation) never shifts another (e.g. search).
"""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode('utf-8'))


def rng_for(seed: int, name: str, *extra: int) -> np.random.Generator:
    """ Return a generator for stream `name` (optionally sub-keyed by `extra`). """
    if seed < 0:
        raise ValueError(f'{seed}: seed must be non-negative')

    entropy = [seed, stream_key(name), *extra]
    return np.random.default_rng(np.random.SeedSequence(entropy))
