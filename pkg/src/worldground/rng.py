"""Counter-based SplitMix64 random source.

Every random draw in data generation, augmentation, and batching goes through
this generator instead of the host language's default RNG. The algorithm is
three xor-shift-multiply rounds over a 64-bit counter, so any consumer in any
language can reproduce a stream byte for byte from (seed, stream) alone:

    state   += 0x9E3779B97F4A7C15                  (golden-ratio increment)
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

Floats take the top 53 bits: (out >> 11) * 2**-53, uniform in [0, 1).
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class Rng:
    """Deterministic stream of draws identified by (seed, stream).

    Streams derived from the same seed but different stream ids are
    statistically disjoint; use one stream per sample / per epoch so that
    regenerating item i never depends on how many draws item i-1 consumed.
    """

    def __init__(self, seed: int, stream: int = 0):
        # fold the stream id through the mixer so (seed, 0) and (seed, 1)
        # start far apart even for small integers
        self._state = _mix(seed & _MASK) ^ _mix((stream * _GOLDEN + 1) & _MASK)

    def spawn(self, stream: int) -> "Rng":
        child = Rng.__new__(Rng)
        child._state = _mix(self._state ^ _mix((stream * _GOLDEN + 1) & _MASK))
        return child

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def next_below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("next_below requires n >= 1")
        # modulo bias is < 2**-50 for any n this package uses; acceptable
        return self.next_u64() % n

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        # Box-Muller, cosine branch only, so one draw costs two u64s everywhere
        import math

        u1 = 1.0 - self.next_float()  # (0, 1], keeps log finite
        u2 = self.next_float()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mean + std * z

    def normals(self, n: int, mean: float = 0.0, std: float = 1.0):
        """Vectorized batch equal, draw for draw, to n normal() calls."""
        import numpy as np

        if n < 0:
            raise ValueError("normals requires n >= 0")
        with np.errstate(over="ignore"):
            z = (np.uint64(self._state)
                 + np.uint64(_GOLDEN) * np.arange(1, 2 * n + 1,
                                                  dtype=np.uint64))
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self._state = (self._state + 2 * n * _GOLDEN) & _MASK
        floats = (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        u1 = 1.0 - floats[0::2]
        u2 = floats[1::2]
        out = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return mean + std * out

    def choice(self, seq):
        return seq[self.next_below(len(seq))]

    def shuffle(self, items: list) -> list:
        """In-place Fisher-Yates; returns the list for chaining."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def permutation(self, n: int) -> list:
        return self.shuffle(list(range(n)))
