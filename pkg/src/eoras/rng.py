"""Seedable, splittable pseudo-random streams.

The generator is fully specified here so that any implementation, in any
language, reproduces the same draws from the same seed:

* Core generator: SplitMix64. State ``s`` advances by the 64-bit golden
  ratio constant ``GAMMA = 0x9E3779B97F4A7C15`` per draw; the output is
  ``mix64(s)`` where::

      mix64(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
                z ^= z >> 27; z *= 0x94D049BB133111EB
                z ^= z >> 31; return z          # all mod 2**64

* Stream keys: a stream is addressed by a seed plus a sequence of labels.
  Starting from ``key = seed``, each label folds in as
  ``key = mix64(key XOR h)`` where ``h`` is ``fnv1a64(utf8(label))`` for
  string labels and ``mix64(label)`` for integer labels. The stream's
  initial state is the resulting key.

* ``uniform``: the top 53 bits of a draw scaled by 2**-53, in [0, 1).
* ``normal``: Box-Muller on consecutive uniform pairs (u1, u2):
  ``r = sqrt(-2 ln(1 - u1))``, returning ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``. Array fills draw ceil(n/2) pairs and truncate.
* ``randint(n)``: a raw draw reduced modulo n.
* ``shuffle``: Fisher-Yates from the last index down, using randint.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


def _fold_label(key: int, label) -> int:
    if isinstance(label, str):
        h = fnv1a64(label.encode("utf-8"))
    elif isinstance(label, (int, np.integer)):
        h = mix64(int(label) & MASK64)
    else:
        raise TypeError(f"stream labels must be str or int, got {type(label).__name__}")
    return mix64((key ^ h) & MASK64)


class Rng:
    """One SplitMix64 stream; derive independent child streams with stream()."""

    __slots__ = ("key", "_state")

    def __init__(self, seed: int, *labels):
        key = int(seed) & MASK64
        for lab in labels:
            key = _fold_label(key, lab)
        self.key = key
        self._state = key

    def stream(self, *labels) -> "Rng":
        """Child stream addressed by labels; independent of draws made here."""
        child = Rng.__new__(Rng)
        key = self.key
        for lab in labels:
            key = _fold_label(key, lab)
        child.key = key
        child._state = key
        return child

    def u64(self) -> int:
        self._state = (self._state + GAMMA) & MASK64
        return mix64(self._state)

    def _u64_block(self, n: int) -> np.ndarray:
        # States for the next n draws are affine in the draw index, so the
        # whole block vectorizes; uint64 arithmetic wraps mod 2**64.
        start = np.uint64(self._state)
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = start + idx * np.uint64(GAMMA)
        self._state = (self._state + n * GAMMA) & MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self) -> float:
        return (self.u64() >> 11) * 2.0**-53

    def uniforms(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u = (self._u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self) -> float:
        u1, u2 = self.uniform(), self.uniform()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = (self._u64_block(2 * pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def randint(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return self.u64() % n

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
