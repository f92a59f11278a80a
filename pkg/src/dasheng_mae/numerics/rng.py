"""Seeded, splittable random streams.

Streams are Philox (counter-based) generators keyed by a seed plus a path of
integers, so ``Rng(7).split(3, 1)`` always yields the same numbers no matter
what else was drawn before. Training uses this to derive one stream per step,
which keeps resumed runs identical to uninterrupted ones.
"""

from __future__ import annotations

import numpy as np


class Rng:
    ALGORITHM = "philox4x64-seedsequence"

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *self.path]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def split(self, *keys: int) -> Rng:
        """Independent child stream identified by ``keys``."""
        return Rng(self.seed, self.path + tuple(keys))

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
