"""Seed derivation: every random stream is a pure function of (master seed, keys)."""

import zlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def derive_rng(seed, *keys):
    """Independent generator for ``(seed, *keys)``; string keys name a stream."""
    entropy = [int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed, *keys):
    """A 63-bit integer seed, for handing to another component."""
    return int(derive_rng(seed, *keys).integers(0, 2**63 - 1))
