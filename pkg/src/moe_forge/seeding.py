"""Deterministic sub-seed derivation.

Every random choice in the package flows from one root seed.  Components
(weight init, shuffling, sampling, per-expert training) get their own
sub-seed derived by hashing the root seed together with a component name,
so adding or reordering components never perturbs the others.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(root: int, *parts: object) -> int:
    """Hash (root, parts...) into a stable 64-bit seed."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode("ascii"))
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") & _MASK64


def derive_rng(root: int, *parts: object) -> np.random.Generator:
    """A numpy Generator seeded from derive_seed(root, *parts)."""
    return np.random.default_rng(derive_seed(root, *parts))
