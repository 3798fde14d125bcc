"""Named, seedable, splittable random streams.

Every stochastic component asks for a stream by label, e.g.
``stream(seed, "ggd", "generator")``; the same labels always give the same
stream, and distinct labels give statistically independent ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, *labels: str | int) -> np.random.Generator:
    """A generator determined by ``seed`` and the label path."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(_label_key, labels)]))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """``n`` independent child generators spawned from ``rng``."""
    return list(rng.spawn(n))
