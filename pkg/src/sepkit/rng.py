"""Self-contained deterministic PRNG for corpus generation and batch sampling.

xoshiro256** seeded through splitmix64. Pure integer arithmetic, so streams
are bit-identical across platforms and library versions; the four-word state
serializes losslessly into checkpoints (``normal`` draws a fresh pair per
call instead of caching a spare for exactly this reason).
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256:
    """xoshiro256** generator with the handful of draws the package needs."""

    def __init__(self, seed: int):
        s = seed & _MASK64
        words = []
        for _ in range(4):
            s, w = _splitmix64(s)
            words.append(w)
        self._s = words

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        # 53-bit mantissa, uniform on [0, 1)
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            u = self.next_u64()
            if u <= limit:
                return u % n

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        # Box-Muller; the sine twin is discarded to keep the state minimal.
        u1 = 1.0 - self.random()
        u2 = self.random()
        return mean + std * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int, mean: float = 0.0, std: float = 1.0) -> list[float]:
        return [self.normal(mean, std) for _ in range(n)]

    def sample_distinct(self, n: int, k: int) -> list[int]:
        """k distinct indices from [0, n), in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from {n}")
        seen: set[int] = set()
        out: list[int] = []
        while len(out) < k:
            i = self.randint(n)
            if i not in seen:
                seen.add(i)
                out.append(i)
        return out

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def spawn(self, index: int) -> "Xoshiro256":
        """Independent child stream derived from (state, index); does not advance self."""
        mix = self._s[0] ^ _rotl(self._s[2], 13) ^ ((index * 0x9E3779B97F4A7C15) & _MASK64)
        return Xoshiro256(mix)

    def get_state(self) -> list[int]:
        return list(self._s)

    def set_state(self, state) -> None:
        words = [int(w) & _MASK64 for w in state]
        if len(words) != 4:
            raise ValueError("xoshiro256 state must have exactly 4 words")
        self._s = words
