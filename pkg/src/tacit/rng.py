"""xoshiro256** pseudo-random generator.

Maze topology depends only on this generator, so it is implemented in plain
integer arithmetic to stay reproducible across platforms and languages.
Seeding expands a single 64-bit seed with splitmix64, the reference
procedure recommended by the xoshiro authors.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    """Fold several integers into one 64-bit seed (order sensitive)."""
    state = 0
    out = 0
    for p in parts:
        state, out = splitmix64(state ^ (p & MASK64))
        state = out
    return out


class Xoshiro256:
    """xoshiro256** 1.0 with splitmix64 seeding."""

    _JUMP = (0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C, 0xA9582618E03FC9AA, 0x39ABDC4529B1661C)

    def __init__(self, seed: int):
        sm = seed & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` (Lemire's method, unbiased)."""
        if n <= 0:
            raise ValueError("bound must be positive")
        m = self.next_u64() * n
        low = m & MASK64
        if low < n:
            threshold = (MASK64 + 1 - n) % n
            while low < threshold:
                m = self.next_u64() * n
                low = m & MASK64
        return m >> 64

    def random(self) -> float:
        """Uniform float in ``[0, 1)`` with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def jump(self) -> None:
        """Advance by 2**128 steps; used to carve out non-overlapping streams."""
        acc = [0, 0, 0, 0]
        for word in self._JUMP:
            for b in range(64):
                if word & (1 << b):
                    acc = [a ^ s for a, s in zip(acc, self._s)]
                self.next_u64()
        self._s = acc

    def split(self) -> "Xoshiro256":
        """Return an independent child stream and advance this one past it."""
        child = Xoshiro256.__new__(Xoshiro256)
        child._s = list(self._s)
        self.jump()
        return child
