"""Portable counter-based SplitMix64 generator.

Every random tensor is drawn from its own stream.  A stream is identified by
the global seed and a name (for example ``"layer3.wq"``); the stream key is

    key = mix64(seed XOR fnv1a64(name))

and the i-th raw 64-bit word of the stream is ``mix64(key + (i + 1) * GAMMA)``
with all arithmetic modulo 2**64.  ``mix64`` is the SplitMix64 finalizer
(Steele, Lea & Flood 2014):

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniforms in (0, 1) are ``((word >> 11) + 0.5) * 2**-53``.  Standard normals
use Box-Muller on consecutive word pairs (2k, 2k+1): ``r = sqrt(-2 ln u0)``,
outputs ``r cos(2 pi u1)`` then ``r sin(2 pi u1)``.

Because the words are a pure function of (seed, name, index) the streams can
be reproduced in any language without sharing generator state.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(name: str) -> int:
    h = _FNV_OFFSET
    for byte in name.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK
    return h


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_key(seed: int, name: str) -> int:
    return mix64((seed & _MASK) ^ fnv1a64(name))


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Stream:
    """Random access view over one named SplitMix64 stream."""

    def __init__(self, seed: int, name: str):
        self.seed = seed
        self.name = name
        self.key = stream_key(seed, name)

    def words(self, n: int, start: int = 0) -> np.ndarray:
        idx = np.arange(start + 1, start + n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GAMMA)
            return _mix64_array(z)

    def uniform(self, n: int, start: int = 0) -> np.ndarray:
        w = self.words(n, start)
        return ((w >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * ((n + 1) // 2))
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(u.size)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]
