"""Named, independent random streams.

Every consumer of randomness (model init, shuffling, forget sampling,
relabelling, augmentation, MIA subsampling) derives its own generator from
``(seed, name, *keys)``, so changing one component never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return a generator for the stream ``name`` under ``seed``.

    ``keys`` further index the stream (e.g. sample index and epoch); they must
    be non-negative integers.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _name_key(name), *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
