"""Small shared helpers: seeded RNG sub-streams and one-hot vectors."""

from __future__ import annotations

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return int.from_bytes(part.encode("utf-8"), "little")
    return int(part)


def rng_stream(seed: int, *path: int | str) -> np.random.Generator:
    """Independent generator for a named sub-stream of a single run seed."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *(_key(p) for p in path)]))


def derive_seed(seed: int, *path: int | str) -> int:
    """Stable integer seed derived from (seed, path), for APIs that take ints."""
    return int(rng_stream(seed, *path).integers(0, 2**63 - 1))


def one_hot(index: int, length: int) -> np.ndarray:
    if not 0 <= index < length:
        raise ValueError(f"index {index} out of range for length {length}")
    vec = np.zeros(length)
    vec[index] = 1.0
    return vec
