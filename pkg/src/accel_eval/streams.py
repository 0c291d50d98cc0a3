"""Counter-based random streams.

Every episode draws from its own Philox stream whose key comes from the
master seed and whose counter block encodes ``(index, tag)``.  Results are
therefore a pure function of ``(master_seed, tag, index)`` and do not depend on
how episodes are distributed across workers.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

ESTIMATION_TAG = 0


@lru_cache(maxsize=64)
def _key(master_seed: int) -> tuple[int, int]:
    state = np.random.SeedSequence(int(master_seed)).generate_state(2, np.uint64)
    return int(state[0]), int(state[1])


def stream(master_seed: int, index: int, tag: int = ESTIMATION_TAG) -> np.random.Generator:
    """Generator for episode ``index`` of stream family ``tag``.

    Tag 0 is used for estimation runs; CE iteration ``j`` uses ``tag = j + 1``.
    """
    if index < 0 or tag < 0:
        raise ValueError("index and tag must be nonnegative")
    key = np.array(_key(master_seed), dtype=np.uint64)
    counter = np.array([0, 0, index, tag], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def uniforms(master_seed: int, indices, k: int, tag: int = ESTIMATION_TAG) -> np.ndarray:
    """``(len(indices), k)`` uniforms, row ``i`` drawn from ``stream(seed, indices[i], tag)``."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.size, k))
    key = np.array(_key(master_seed), dtype=np.uint64)
    counter = np.zeros(4, dtype=np.uint64)
    counter[3] = tag
    for row, i in enumerate(indices):
        counter[2] = i
        out[row] = np.random.Generator(np.random.Philox(key=key, counter=counter)).random(k)
    return out
