"""Deterministic random streams keyed by (seed, labels...).

Streams come from a counter-based Philox generator keyed through a hashed
label tuple, so results do not depend on execution order or thread count:
any (seed, engine, step) triple always yields the same draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["make_rng"]


def _label_entropy(label) -> int:
    data = repr(label).encode()
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Generator for the stream identified by (seed, *labels)."""
    entropy = [int(seed)] + [_label_entropy(l) for l in labels]
    key = np.random.SeedSequence(entropy).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
