"""Deterministic random streams derived from a global seed plus stream tags."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derived_rng(*keys):
    """A Generator whose stream depends only on the ordered key tuple."""
    return np.random.default_rng(np.random.SeedSequence([_key_int(k) for k in keys]))
