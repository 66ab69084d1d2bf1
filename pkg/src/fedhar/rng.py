"""SplitMix64 stream and sampling without replacement.

Client schedules are drawn from this generator rather than numpy so the
sequence is pinned down by a few lines of integer arithmetic and does not
move between library versions.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 finalizer (Stafford variant 13)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound), unbiased by rejection."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % bound


def derive_seed(master_seed: int, *path: int) -> int:
    """Deterministically fold integer labels into a child 64-bit seed."""
    s = mix64(master_seed & MASK64)
    for p in path:
        s = mix64(s ^ mix64((p + 1) & MASK64))
    return s


def sample_without_replacement(n: int, k: int, rng: SplitMix64) -> list[int]:
    """First ``k`` positions of a partial Fisher-Yates shuffle of ``range(n)``."""
    if not 0 <= k <= n:
        raise ValueError(f"cannot draw {k} of {n}")
    idx = list(range(n))
    for i in range(k):
        j = i + rng.below(n - i)
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:k]
