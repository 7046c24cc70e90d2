"""Seeded 64-bit PRNG used everywhere randomness matters.

SplitMix64 (Steele, Lea & Flood 2014): the state advances by the golden-ratio
increment ``0x9E3779B97F4A7C15`` and each output is the state passed through
two xor-shift-multiply rounds::

    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)

Because output ``k`` depends only on ``seed + k * gamma`` the generator
vectorizes cleanly, and any implementation that follows the recipe below
reproduces the same streams bit for bit:

* uniform double in [0, 1): ``(z >> 11) * 2**-53``
* standard normal: Box-Muller on consecutive pairs ``(u1, u2)`` with
  ``u1 = ((z1 >> 11) + 1) * 2**-53`` (so ``u1`` is in (0, 1]) giving
  ``sqrt(-2 ln u1) * cos(2 pi u2)`` and ``sqrt(-2 ln u1) * sin(2 pi u2)``
* permutation: Fisher-Yates from the last index down, swap ``i`` with
  ``j = floor(u * (i + 1))``
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 2.0 ** -53


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-style SplitMix64 stream.

    Parameters
    ----------
    seed : int
        Any Python integer; reduced modulo 2**64.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
            z = np.uint64(self.state) + steps
            out = _mix(z)
        self.state = (self.state + n * GAMMA) & _MASK
        return out

    def next_int(self) -> int:
        return int(self.next_u64(1)[0])

    def uniform(self, size=None) -> np.ndarray | float:
        shape = () if size is None else np.atleast_1d(size)
        n = int(np.prod(shape)) if size is not None else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53
        if size is None:
            return float(u[0])
        return u.reshape(tuple(int(s) for s in shape))

    def normal(self, size) -> np.ndarray:
        shape = tuple(int(s) for s in np.atleast_1d(size))
        n = int(np.prod(shape))
        m = (n + 1) // 2
        raw = self.next_u64(2 * m) >> np.uint64(11)
        u1 = (raw[0::2].astype(np.float64) + 1.0) * _TWO_M53
        u2 = raw[1::2].astype(np.float64) * _TWO_M53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        n = int(n)
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def integers(self, low: int, high: int, size) -> np.ndarray:
        u = self.uniform(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def spawn(self) -> "SplitMix64":
        """Independent child stream seeded from the next output."""
        return SplitMix64(self.next_int())
