"""Seeded generators.

All randomness goes through Philox (a counter-based 64-bit generator) keyed by
a :class:`numpy.random.SeedSequence` built from the run seed plus a tuple of
stream tags, so every consumer draws from an independent, reproducible stream.
"""

from __future__ import annotations

import zlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def _word(tag) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    return int(tag) & SEED_MASK


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for ``seed`` on the named sub-stream, e.g. ``make_rng(7, "shuffle", fold, epoch)``."""
    entropy = [int(seed) & SEED_MASK] + [_word(t) for t in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
