"""splitmix64 pseudo-random stream.

splitmix64 is counter based: output ``i`` is ``mix(seed + (i + 1) * GAMMA)``,
so whole blocks of the stream are generated with vectorized uint64 arithmetic.
"""
import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Sequential splitmix64 generator.

    >>> SplitMix64(0).next_u64()
    16294208416658607535
    """

    def __init__(self, seed):
        self.state = int(seed) & _MASK

    def u64(self, n):
        """Next ``n`` raw 64-bit outputs as a uint64 array."""
        with np.errstate(over="ignore"):
            counters = np.arange(1, n + 1, dtype=np.uint64) * GAMMA + np.uint64(self.state)
            out = _mix(counters)
        self.state = (self.state + n * int(GAMMA)) & _MASK
        return out

    def next_u64(self):
        return int(self.u64(1)[0])

    def uniform(self, n, low=0.0, high=1.0):
        """``n`` doubles in ``[low, high)`` from the top 53 bits of each output."""
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, n):
        """Standard normal draws via Box-Muller (two uniforms per draw)."""
        u = self.uniform(2 * n)
        u1 = 1.0 - u[:n]  # (0, 1]
        u2 = u[n:]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def below(self, bound):
        """Integer in ``[0, bound)`` by multiply-shift on the raw output."""
        return (self.next_u64() * int(bound)) >> 64

    def shuffle(self, items):
        """Fisher-Yates shuffle, returning a new list."""
        items = list(items)
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items
