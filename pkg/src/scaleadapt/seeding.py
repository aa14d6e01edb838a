"""Derived random streams.

Every stochastic component draws from its own named stream so that adding or
reordering one consumer never perturbs another (scene generation, batch
sampling, patch rects, and model init all stay independently reproducible).
"""

import hashlib

import numpy as np


def _to_entropy(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Generator for the stream named by `tags`, derived from the run seed."""
    entropy = [_to_entropy(seed)] + [_to_entropy(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
