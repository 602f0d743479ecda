"""Seeded deterministic randomness for every stochastic operation.

All randomness flows through :class:`Stream`, a SplitMix64 generator with a
documented output sequence, so seeded operations are bit-reproducible:

* state update: ``state <- (state + GOLDEN) mod 2**64``
* output word: ``mix64(state)`` (the SplitMix64 finalizer)
* ``uniform``: ``(next_u64() >> 11) * 2.0**-53``, a float in ``[0, 1)``
* ``below(n)``: rejection sampling on whole 64-bit words followed by ``% n``,
  which is unbiased; ``below(1)`` returns 0 without consuming a word
* ``shuffle``: Fisher-Yates from the top index down; position ``i`` swaps
  with ``j = below(i + 1)`` for ``i = len-1 .. 1``
* ``normals``: Box-Muller pairs ``(r*cos(2*pi*u2), r*sin(2*pi*u2))`` with
  ``r = sqrt(-2*log(1 - u1))``; the pair consumes uniforms ``u1`` then ``u2``

Sub-seeds for per-example or per-epoch randomness come from
:func:`derive_seed`, an order-sensitive chain of ``mix64`` calls.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB


def mix64(value: int) -> int:
    """SplitMix64 finalizer on a 64-bit word."""
    v = value & MASK64
    v ^= v >> 30
    v = (v * _MUL1) & MASK64
    v ^= v >> 27
    v = (v * _MUL2) & MASK64
    v ^= v >> 31
    return v


def derive_seed(*parts: int) -> int:
    """Combine integer parts into a sub-seed; sensitive to order and arity."""
    acc = GOLDEN
    for part in parts:
        acc = mix64((acc + GOLDEN) ^ mix64(part & MASK64))
    return acc


def _mix64_vec(words: np.ndarray) -> np.ndarray:
    v = words.astype(np.uint64, copy=True)
    v ^= v >> np.uint64(30)
    v *= np.uint64(_MUL1)
    v ^= v >> np.uint64(27)
    v *= np.uint64(_MUL2)
    v ^= v >> np.uint64(31)
    return v


class Stream:
    """SplitMix64 stream; every drawing method documents its word usage."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN) & MASK64
        return mix64(self._state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, count: int) -> np.ndarray:
        """Vectorized ``uniform``; identical to ``count`` sequential draws."""
        if count == 0:
            return np.empty(0)
        steps = np.arange(1, count + 1, dtype=np.uint64) * np.uint64(GOLDEN)
        words = _mix64_vec(np.uint64(self._state) + steps)
        self._state = (self._state + GOLDEN * count) & MASK64
        return (words >> np.uint64(11)) * 2.0**-53

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n < 1:
            raise ValueError("below() needs n >= 1")
        if n == 1:
            return 0
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            word = self.next_u64()
            if word < limit:
                return word % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates using ``below``."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def normals(self, count: int) -> np.ndarray:
        """Standard normal draws via Box-Muller on consecutive uniform pairs."""
        if count == 0:
            return np.empty(0)
        pairs = (count + 1) // 2
        u = self.uniforms(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count]
