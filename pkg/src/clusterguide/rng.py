"""Named deterministic random streams.

All randomness flows through numpy's Philox4x64 counter-based generator,
keyed by (seed, purpose << 48 | index) pairs. Keyed streams are independent
and platform-stable, training loops can resume mid-run bit-exactly (step i
always draws from the same stream), and sampling chains get their own stream
derived as seed XOR chain_index.
"""

from __future__ import annotations

import numpy as np

WORLD = 1
VOCAB = 2
INIT = 3
TRAIN = 4
TUNE = 5
CHAIN = 6
BASE = 7
AUGMENT = 8
GENERIC = 9

_INDEX_BITS = 48


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Generator for the given (seed, purpose, index) stream."""
    if index < 0 or index >= (1 << _INDEX_BITS):
        raise ValueError(f"stream index {index} out of range")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (purpose << _INDEX_BITS) | index],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def chain_stream(seed: int, chain_index: int) -> np.random.Generator:
    """Per-chain sampling stream, derived as seed XOR chain_index."""
    return stream(seed ^ chain_index, CHAIN)
