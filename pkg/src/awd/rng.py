"""Labeled, counter-based random streams.

All randomness in a run flows from a single integer seed. Each consumer
asks for a stream by (label, *indices); identical requests always return
generators in the same state, so any draw can be replayed exactly without
carrying generator state around.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """A fresh counter-based generator for the named stream."""
    ss = np.random.SeedSequence([int(seed), _label_entropy(label), *map(int, indices)])
    return np.random.Generator(np.random.Philox(ss))
