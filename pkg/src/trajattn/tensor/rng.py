"""Deterministic random streams for prototype sampling and experiments.

Built on the Philox 4x64 counter-based generator (10 rounds, the constants
numpy ships): the state transition is pure 64-bit integer arithmetic, so a
given seed yields the same draw sequence on every platform. One ``Rng`` per
worker; streams for sub-tasks come from :meth:`Rng.derive`.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Rng"]

_U64_MAX = 2**64


class Rng:
    """Seeded random source. Identical seed => identical stream of draws."""

    def __init__(self, seed: int, _bit_generator=None):
        if not (0 <= int(seed) < _U64_MAX):
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        bg = _bit_generator if _bit_generator is not None else np.random.Philox(key=self.seed)
        self._gen = np.random.Generator(bg)

    def derive(self, key: int) -> "Rng":
        """Independent child stream ``key`` (Philox counter jump, no draws shared)."""
        if key < 0:
            raise ValueError("derive key must be non-negative")
        child = np.random.Philox(key=self.seed).jumped(key + 1)
        return Rng(self.seed, _bit_generator=child)

    def integers(self, low: int, high: int) -> int:
        """One integer uniform on [low, high)."""
        return int(self._gen.integers(low, high))

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices drawn uniformly from range(n), in draw order."""
        return self._gen.choice(n, size=size, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)
