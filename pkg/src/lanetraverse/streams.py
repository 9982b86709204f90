"""Counter-based random streams keyed by integer tuples."""

from __future__ import annotations

import hashlib

import numpy as np


class ConfigurationError(ValueError):
    """Invalid or unsupported configuration."""


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for ``(seed, *key)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in key]])
    return np.random.Generator(np.random.Philox(ss))


def name_key(name: str) -> int:
    """Stable 32-bit key for a string identifier."""
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=4).digest(), "little")
