"""Seeded, platform-stable pseudo-random streams.

Every piece of randomness in the package flows from a single root seed.
Streams are xoshiro256** generators seeded through the splitmix64
finalizer, implemented here with plain 64-bit integer arithmetic so a
given seed produces a bit-identical sequence on every platform and in
every process.  Independent substreams come from :meth:`RngStream.derive`,
which mixes a child index into the parent *seed* (never the consumed
state), so derivation order does not affect reproducibility.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """splitmix64 output function; avalanches nearby inputs apart."""
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class RngStream:
    """Deterministic xoshiro256** stream identified by its seed.

    Single-owner by convention: one consumer advances a stream, parallel
    or logically separate work derives child streams instead of sharing.
    """

    __slots__ = ("seed", "_s0", "_s1", "_s2", "_s3", "_spare")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        # Fill the four state words from a splitmix64 chain; the chain
        # never yields four zeros, which xoshiro cannot escape from.
        s = self.seed
        words = []
        for _ in range(4):
            s = (s + _GOLDEN) & _MASK64
            words.append(_mix64(s))
        if not any(words):  # pragma: no cover - unreachable with mix64
            words[0] = 1
        self._s0, self._s1, self._s2, self._s3 = words
        self._spare: float | None = None

    def derive(self, index: int) -> "RngStream":
        """Child stream deterministic in (parent seed, index)."""
        return RngStream(_mix64(_mix64(self.seed) + (index & _MASK64)))

    def next_u64(self) -> int:
        result = (_rotl((self._s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (self._s1 << 17) & _MASK64
        self._s2 ^= self._s0
        self._s3 ^= self._s1
        self._s1 ^= self._s2
        self._s0 ^= self._s3
        self._s2 ^= t
        self._s3 = _rotl(self._s3, 45)
        return result

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """Uniform draw in [low, high)."""
        u = (self.next_u64() >> 11) * 2.0**-53
        return low + (high - low) * u

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        """Gaussian draw via the Marsaglia polar method (spare cached)."""
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return mean + std * z
        while True:
            u = 2.0 * self.uniform() - 1.0
            v = 2.0 * self.uniform() - 1.0
            s = u * u + v * v
            if 0.0 < s < 1.0:
                break
        scale = math.sqrt(-2.0 * math.log(s) / s)
        self._spare = v * scale
        return mean + std * u * scale

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n), bias-free via rejection."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def choice(self, seq):
        if not seq:
            raise ValueError("cannot choose from an empty sequence")
        return seq[self.randint(len(seq))]

    def sample(self, seq, k: int) -> list:
        """k distinct elements, order randomized (partial Fisher-Yates)."""
        if k < 0 or k > len(seq):
            raise ValueError(f"cannot sample {k} items from {len(seq)}")
        pool = list(seq)
        for i in range(k):
            j = i + self.randint(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def uniforms(self, n: int) -> list[float]:
        return [self.uniform() for _ in range(n)]

    def normals(self, n: int, mean: float = 0.0, std: float = 1.0) -> list[float]:
        return [self.normal(mean, std) for _ in range(n)]
