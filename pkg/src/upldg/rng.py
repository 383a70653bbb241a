"""Seed derivation helpers.

Every random draw in the package flows from an explicit integer seed. Two
mechanisms are used:

* ``derive_rng`` builds an independent ``numpy.random.Generator`` from a base
  seed plus a tuple of keys (ints or strings), so separate concerns such as
  batch sampling and dropout never share a stream.
* ``counter_uniform`` is a stateless counter-based generator: the value at a
  given index tuple depends only on that tuple, never on evaluation order.
  MC-dropout masks use it so each pass is reproducible in isolation.
"""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    key = int(key)
    if key < 0:
        raise ValueError(f"seed keys must be non-negative, got {key}")
    return key


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Return a generator seeded from ``(seed, *keys)``."""
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *keys: Key) -> int:
    """Return a 63-bit integer seed derived from ``(seed, *keys)``."""
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, *indices) -> np.ndarray:
    """Uniform [0, 1) values addressed by broadcastable integer index arrays.

    ``counter_uniform(s, a, b, c)`` has the broadcast shape of ``a, b, c`` and
    element ``[i, j, k]`` depends only on ``(s, a[i], b[j], c[k])``.
    """
    with np.errstate(over="ignore"):
        h = np.asarray(_splitmix(np.asarray(_key_to_int(seed), dtype=np.uint64) + _GOLDEN))
        for idx in indices:
            arr = np.asarray(idx).astype(np.uint64)
            h = _splitmix(h ^ (arr + _GOLDEN))
        return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
