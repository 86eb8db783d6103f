"""Deterministic RNG derivation shared by every stage.

All randomness in the pipeline flows through these helpers so that results
depend only on (seed, structural keys) and never on scheduling or dict order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Generator keyed by a base seed plus integer subkeys (e.g. class id, fold)."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def stable_text_key(text: str) -> int:
    """64-bit key for a string, stable across processes (unlike ``hash``)."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed: int, *keys: int) -> int:
    """Collapse (seed, keys) into a single 63-bit seed, for storing in manifests."""
    h = hashlib.sha256()
    h.update((int(seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little"))
    for k in keys:
        h.update((int(k) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little"))
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF
