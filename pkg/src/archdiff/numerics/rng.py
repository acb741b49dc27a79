"""Seeded random streams.

A stream is a Philox counter-based generator keyed by ``(seed, stream_id)``,
so independent chains, ensemble members and workers each own a reproducible
sequence no matter which thread runs them. Normal variates come from numpy's
ziggurat transform of the Philox output.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = self.seed | (self.stream_id << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"

    def stream(self, stream_id: int) -> "Rng":
        """A fresh stream sharing this seed."""
        return Rng(self.seed, stream_id)

    def child(self, *path: int) -> "Rng":
        """Derive a stream for a nested unit of work (e.g. iteration, member)."""
        sid = self.stream_id
        for p in path:
            sid = (sid * 0x9E3779B97F4A7C15 + int(p) + 1) & _MASK64
        return Rng(self.seed, sid)

    def randn(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size=None, replace: bool = True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def randn(rng: Rng, shape):
    """i.i.d. standard normal tensor drawn from ``rng``."""
    from archdiff.numerics.tensor import Tensor

    return Tensor(rng.randn(shape))
