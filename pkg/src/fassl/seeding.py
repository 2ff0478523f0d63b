"""Deterministic RNG stream derivation.

Every random draw in a run flows from one master seed. Sub-streams are keyed
by a purpose tag plus integer indices (round, client id, ...) and derived via
SHA-256, so streams never collide and results are reproducible across
processes and platforms (no salted ``hash()``, no OS entropy).
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def derive_seed(master_seed: int, purpose: str, *indices: int) -> int:
    """Derive a 64-bit child seed from (master_seed, purpose, *indices)."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", master_seed & 0xFFFFFFFFFFFFFFFF))
    h.update(purpose.encode("utf-8"))
    h.update(b"\x00")
    for idx in indices:
        h.update(struct.pack("<Q", idx & 0xFFFFFFFFFFFFFFFF))
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(master_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """A fresh Generator seeded from the derived child seed."""
    return np.random.default_rng(derive_seed(master_seed, purpose, *indices))
