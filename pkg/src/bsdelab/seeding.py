"""Named sub-stream derivation from a single master seed.

Every source of randomness in the package derives its generator from the
master seed plus a tuple of names (e.g. ``("paths", 3)`` for the fourth
path block, ``("lhs",)`` for the left side of a two-estimator comparison).
String names are mapped to 32-bit tokens with CRC32, which is stable
across processes and platforms, so a rerun with the same seed reproduces
every stream bit for bit regardless of thread count or call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _token(name: str | int) -> int:
    if isinstance(name, str):
        return zlib.crc32(name.encode("utf-8"))
    return int(name) & 0xFFFFFFFF


def derive_seed_sequence(seed: int, *names: str | int) -> np.random.SeedSequence:
    """Seed sequence for the sub-stream identified by ``names``."""
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_token(n) for n in names))


def derive_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the sub-stream identified by ``names``."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, *names)))
