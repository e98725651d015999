"""Seeded PCG32 generator.

One config seed derives every random stream in the repo (parameter init,
corpus synthesis, batch shuffling, test instances) via the PCG32 stream
parameter, so runs are reproducible across platforms without depending on
any library's RNG internals.

Constants are the reference PCG-XSH-RR 64/32 ones:
multiplier 6364136223846793005, output = 32-bit xorshift-rotate of state.
"""

from __future__ import annotations

import math

_MULT = 6364136223846793005
_MASK64 = (1 << 64) - 1

# Stream ids, one per subsystem. Keep stable: checkpoints replay them.
STREAM_PARAMS = 1
STREAM_CORPUS = 2
STREAM_SHUFFLE = 3
STREAM_TESTS = 4


class Pcg32:
    """PCG-XSH-RR 64/32. `seed` selects the sequence, `stream` the increment."""

    def __init__(self, seed: int, stream: int = 0):
        self.inc = (((stream << 1) | 1)) & _MASK64
        self.state = 0
        self.next_u32()
        self.state = (self.state + (seed & _MASK64)) & _MASK64
        self.next_u32()

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * _MULT + self.inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((32 - rot) & 31))) & 0xFFFFFFFF

    def random(self) -> float:
        """Uniform double in [0, 1) with 32 bits of resolution."""
        return self.next_u32() / 4294967296.0

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive (rejection-free modulo is
        acceptable here: ranges are tiny relative to 2^32)."""
        span = hi - lo + 1
        return lo + self.next_u32() % span

    def normal(self) -> float:
        """Standard normal via Box-Muller (no spare cached, keeps state simple)."""
        u1 = self.random()
        while u1 == 0.0:
            u1 = self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def shuffle(self, xs: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(xs) - 1, 0, -1):
            j = self.randint(0, i)
            xs[i], xs[j] = xs[j], xs[i]

    def getstate(self) -> tuple[int, int]:
        return (self.state, self.inc)

    def setstate(self, state: tuple[int, int]) -> None:
        self.state, self.inc = int(state[0]) & _MASK64, int(state[1]) & _MASK64


def stream(seed: int, stream_id: int) -> Pcg32:
    """Derive the generator for one subsystem from the single config seed."""
    return Pcg32(seed, stream_id)
