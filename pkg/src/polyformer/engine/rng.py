"""Counter-based random streams keyed by (seed, labels...).

Each consumer asks for its own stream by label, so values do not depend on
the order in which unrelated consumers draw.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Independent Philox stream for ``(seed, *labels)``."""
    ss = np.random.SeedSequence([_key(seed)] + [_key(p) for p in labels])
    return np.random.Generator(np.random.Philox(ss))
