"""Pinned 64-bit hashing and a small deterministic RNG.

Python's built-in hash() is salted per process and random.Random is a
large-state generator whose stream is awkward to reproduce in other
languages.  Everything here is fixed-constant integer arithmetic so that
green-list membership, seed derivation, and sampling are bit-identical
across runs, platforms, and reimplementations.
"""
from __future__ import annotations

MASK64 = 0xFFFFFFFFFFFFFFFF

_FNV_OFFSET = 14695981039346656037  # 0xCBF29CE484222325
_FNV_PRIME = 1099511628211  # 0x100000001B3

_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a of the UTF-8 encoding of text."""
    h = _FNV_OFFSET
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * _FNV_PRIME) & MASK64
    return h


def mix64(x: int) -> int:
    """One splitmix64 step from state x (golden-gamma add + finalizer)."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, *tags: str | int) -> int:
    """Domain-separated child seed: mix base with string/int tags."""
    h = base & MASK64
    for tag in tags:
        if isinstance(tag, int):
            h = mix64(h ^ (tag & MASK64))
        else:
            h = mix64(h ^ fnv1a64(tag))
    return h


class SplitMix64:
    """Sequential splitmix64 stream; tiny state, trivially portable."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX_A) & MASK64
        z = ((z ^ (z >> 27)) * _MIX_B) & MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] by rejection-free modular draw.

        Ranges here are tiny (<= a few hundred), so the modulo bias of
        ~range/2^64 is far below anything observable.
        """
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)

    def choice(self, seq):
        if not seq:
            raise ValueError("choice from empty sequence")
        return seq[self.randint(0, len(seq) - 1)]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]
