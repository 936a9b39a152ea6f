"""
rng.py
Seeded random streams. Every stream is a Philox (counter-based) generator keyed by
(seed, *labels), so a named stream draws the same values no matter what else was
drawn before it.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str | int) -> int:
    if isinstance(label, int):
        return label
    return zlib.crc32(label.encode("utf-8"))


def make_rng(seed: int, *labels: str | int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(_label_key(lb) for lb in labels))
    return np.random.Generator(np.random.Philox(seq))
