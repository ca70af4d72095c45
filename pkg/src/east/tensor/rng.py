"""Seeded random streams.

All randomness goes through :class:`Rng`, a thin wrapper over numpy's
``Generator`` with the PCG64 bit generator. PCG64 output for a given seed is
fixed across platforms and numpy versions, and child streams are derived with
``SeedSequence`` spawn keys so that independent consumers never share state.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key)))

    def child(self, *key: int) -> "Rng":
        """Independent stream identified by ``key`` under this one."""
        return Rng(self.seed, self.key + tuple(key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None, scale: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(size) * scale).astype(dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
