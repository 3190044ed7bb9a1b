"""Deterministic, portable random number generation.

The generator is counter-based splitmix64: draw ``i`` of a stream with seed
``s`` is ``mix64(s + (i + 1) * GOLDEN) mod 2**64`` where ``mix64`` is the
splitmix64 finalizer. Each draw is a pure function of (seed, counter), so a
stream can be replayed from any position and is bit-identical on every
platform: the integer path uses only exact 64-bit arithmetic and uniforms are
``(u >> 11) * 2**-53``. Gaussian draws apply Box-Muller to uniform pairs
(exact given the platform libm).
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_U53 = 2.0**-53


def _mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def _tag_to_u64(tag) -> int:
    if isinstance(tag, bool) or not isinstance(tag, (int, str)):
        raise TypeError(f"stream tags must be int or str, got {type(tag).__name__}")
    if isinstance(tag, int):
        return tag & _MASK
    return _fnv1a64(tag.encode("utf-8"))


class RngState:
    """Counter-based splitmix64 stream; equal seeds give identical streams."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def derive(self, *tags) -> "RngState":
        """Child stream whose seed folds in the given int/str tags."""
        s = self.seed
        for tag in tags:
            s = _mix64(((s ^ _tag_to_u64(tag)) + GOLDEN) & _MASK)
        return RngState(s)

    @classmethod
    def from_tags(cls, seed: int, *tags) -> "RngState":
        return cls(seed).derive(*tags)

    def next_u64(self) -> int:
        self.counter += 1
        return _mix64((self.seed + self.counter * GOLDEN) & _MASK)

    def u64_array(self, n: int) -> np.ndarray:
        """Next n raw draws, vectorized; bit-identical to n next_u64() calls."""
        if n < 0:
            raise ValueError("n must be non-negative")
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
            return z ^ (z >> np.uint64(31))

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return (self.next_u64() >> 11) * _U53

    def uniforms(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * _U53
        return u.reshape(shape)

    def normals(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller; consumes 2*ceil(n/2) uniforms."""
        n = int(np.prod(shape))
        npairs = (n + 1) // 2
        u = self.uniforms(2 * npairs)
        u1 = np.maximum(u[0::2], _U53)
        u2 = u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * npairs, dtype=np.float64)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:n].reshape(shape)

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def randbelow(self, n: int) -> int:
        """Integer in [0, n); bias from the uniform mapping is below 2**-53."""
        if n <= 0:
            raise ValueError("n must be positive")
        return min(int(self.uniform() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n), int64."""
        out = np.arange(n, dtype=np.int64)
        if n < 2:
            return out
        u = self.uniforms(n - 1)
        for pos, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[pos] * (i + 1)), i)
            out[i], out[j] = out[j], out[i]
        return out
