"""Order-independent seed derivation."""

from __future__ import annotations

import numpy as np


def derive_seed(seed: int, *key: int) -> int:
    """64-bit seed for the stream identified by ``key`` under ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
