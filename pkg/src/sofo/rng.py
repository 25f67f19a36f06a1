"""Seedable, splittable random streams.

Each stream wraps a counter-based Philox generator seeded from a
``numpy.random.SeedSequence``. Splitting spawns child sequences, so a set of
replications gets the same draws no matter how they are scheduled.
"""

from __future__ import annotations

import numpy as np


class RandomStream:
    """Single-owner random stream; use :meth:`split` to hand out children."""

    def __init__(self, seed=0, *, _seq: np.random.SeedSequence | None = None):
        self._seq = _seq if _seq is not None else np.random.SeedSequence(seed)
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    @property
    def entropy(self):
        return self._seq.entropy

    @property
    def spawn_key(self):
        return tuple(self._seq.spawn_key)

    def split(self, n: int) -> list["RandomStream"]:
        """Return ``n`` independent child streams.

        Successive calls return fresh children, never repeats.
        """
        return [RandomStream(_seq=s) for s in self._seq.spawn(n)]

    def child(self) -> "RandomStream":
        return self.split(1)[0]

    # thin pass-throughs used throughout the package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def beta(self, a, b, size=None):
        return self.generator.beta(a, b, size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self):
        return f"RandomStream(entropy={self.entropy}, spawn_key={self.spawn_key})"


def as_stream(rng) -> RandomStream:
    if isinstance(rng, RandomStream):
        return rng
    return RandomStream(rng)
