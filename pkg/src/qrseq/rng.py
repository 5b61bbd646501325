"""Deterministic named random streams.

Every source of randomness in a run (parameter init, epoch shuffling,
negative sampling, dropout, evaluation candidates) pulls from its own
stream derived from the single run seed plus a label path, so changing
one consumer never perturbs the draws seen by another.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *labels) -> np.random.Generator:
    """Generator keyed by (seed, *labels); identical inputs give identical draws.

    Labels may be strings or integers (user ids, epoch numbers). The key is
    hashed with sha256 so streams are platform- and process-independent.
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    entropy = int.from_bytes(h.digest(), "big")
    return np.random.default_rng(np.random.SeedSequence(entropy))
