"""Counter-based seed fan-out.

Every random stream in a run is derived from ``(seed, purpose tag, index)``
so that independent consumers never share state and a single top-level seed
reproduces the whole run.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, tag: str, index: int = 0) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode()), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def make_rng(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag, index))
