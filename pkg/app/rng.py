"""Seeded, splittable pseudo-random streams."""

from typing import List, Tuple

import numpy as np

# stream namespaces used by the trainers and the evaluation harness
SHUFFLE = 0
DISTORT = 1
BERNOULLI = 2
EVALUATE = 3
SYNTHETIC = 4
SPLIT = 5


class RngStream:
    """
    Deterministic random stream addressed by (seed, path).

    Children are derived through numpy's SeedSequence spawn keys, so
    `RngStream(s).child(3, 7)` yields the same draws in every process no
    matter which other streams were used before.
    """

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._generator = None

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
            self._generator = np.random.default_rng(sequence)
        return self._generator

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(keys))

    def split(self, count: int) -> List["RngStream"]:
        return [self.child(i) for i in range(count)]

    # draws
    def normal(self, scale: float, size) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=size)

    def uniform(self, low: float, high: float) -> float:
        return float(self.generator.uniform(low, high))

    def integers(self, low: int, high_inclusive: int) -> int:
        return int(self.generator.integers(low, high_inclusive, endpoint=True))

    def random(self) -> float:
        return float(self.generator.random())

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)
