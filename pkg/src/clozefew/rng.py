"""Deterministic randomness, shared by every component.

All randomness in this package flows from a single 64-bit run seed through
named sub-streams (sampling, shuffling, augmentation, init, ...), so each
source of randomness can be varied independently and every run can be
replayed bit-exactly.

The primitive generator is splitmix64, fixed here bit-exactly so that
sampled datasets are reproducible across platforms and Python versions:

    state  = (state + 0x9E3779B97F4A7C15) mod 2**64
    z      = state
    z      = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2**64
    z      = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2**64
    output = z ^ (z >> 31)

Sub-stream seeds are derived by folding tagged parts into the root seed
(see `derive`).  Heavier numeric work (parameter init, masking noise) runs
on numpy PCG64 generators seeded from derived sub-seeds.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (next_state, output)."""
    state = (state + _GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return state, z ^ (z >> 31)


class SplitMix64:
    """Sequential splitmix64 stream with rejection-sampled bounded draws."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_uint64(self) -> int:
        self._state, out = _mix(self._state)
        return out

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n), bias-free via rejection sampling."""
        if n <= 0:
            raise ValueError(f"randbelow needs n >= 1, got {n}")
        limit = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            draw = self.next_uint64()
            if draw < limit:
                return draw % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates: for i = n-1..1, swap i with randbelow(i+1)."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]


def derive(seed: int, *parts: int | str) -> int:
    """Derive a sub-stream seed from a root seed and tagged parts.

    Strings are absorbed as UTF-8 bytes in 8-byte little-endian chunks
    preceded by their byte length; integers as a single 64-bit chunk.  Each
    chunk is XOR-folded into the state and passed through one splitmix64
    step, so distinct part sequences give independent streams.
    """
    state = seed & _MASK64
    for part in parts:
        if isinstance(part, str):
            data = part.encode("utf-8")
            chunks = [len(data)] + [
                int.from_bytes(data[i : i + 8], "little") for i in range(0, len(data), 8)
            ]
        else:
            chunks = [part & _MASK64]
        for chunk in chunks:
            state, out = _mix(state ^ chunk)
            state ^= out
    _, out = _mix(state)
    return out


def stream(seed: int, *parts: int | str) -> SplitMix64:
    """Named splitmix64 sub-stream of the root seed."""
    return SplitMix64(derive(seed, *parts))


def generator(seed: int, *parts: int | str) -> np.random.Generator:
    """Named numpy PCG64 generator seeded from the derived sub-seed."""
    return np.random.default_rng(derive(seed, *parts))


def shuffled(items: list, seed: int, *parts: int | str) -> list:
    """Copy of `items` shuffled by the named sub-stream."""
    out = list(items)
    stream(seed, *parts).shuffle(out)
    return out
