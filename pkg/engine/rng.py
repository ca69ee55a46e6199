"""
FlowAug - Seeded Random Streams

Every stochastic step draws from a SeededRng. The generator is numpy's PCG64,
whose output stream for a given seed is fixed across platforms and numpy
releases. Child streams are derived with SeedSequence spawn keys so that
independent consumers (epochs, folds, augmentation rounds) never share draws.
"""

import zlib
from typing import Sequence, Tuple, Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if int(key) < 0:
        raise ValueError(f"spawn keys must be non-negative, got {key}")
    return int(key)


class SeededRng:
    """
    Deterministic random stream

    Args:
        seed: non-negative 64-bit seed
        spawn_key: path of derivation keys from the root seed
    """

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(spawn_key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *keys: Key) -> "SeededRng":
        """Derive an independent stream identified by `keys`."""
        return SeededRng(self.seed, self.spawn_key + tuple(_key_to_int(k) for k in keys))

    def derive_seed(self, *keys: Key) -> int:
        """Derive a plain integer seed (for libraries that take `random_state`)."""
        sequence = np.random.SeedSequence(
            self.seed, spawn_key=self.spawn_key + tuple(_key_to_int(k) for k in keys)
        )
        return int(sequence.generate_state(1, dtype=np.uint32)[0])

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def normal(self, shape: Sequence[int], scale: float = 1.0) -> np.ndarray:
        return self._generator.normal(0.0, 1.0, size=tuple(shape)) * scale

    def uniform(self, low: float, high: float, shape=None):
        return self._generator.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def random(self, shape=None):
        return self._generator.random(size=shape)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, spawn_key={self.spawn_key})"
