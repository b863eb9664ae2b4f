"""Seed derivation: every random stream comes from one root seed."""

import hashlib

import numpy as np


def derive_seed(seed: int, purpose: str) -> int:
    """Stable 63-bit seed for ``(seed, purpose)``, independent of PYTHONHASHSEED."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose))
