"""Deterministic randomness for every stochastic component.

Wraps numpy's Philox bit generator (counter-based, splittable) so that a
single u64 seed pins corpus generation, initialization, dropout masks and
data ordering.  Streams are derived by `split`, never by sharing a
generator between components, which keeps draw order independent of
unrelated code paths.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import ContractError

_U64 = 2**64


def _label_key(label) -> int:
    # stable across platforms and sessions; no reliance on hash()
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ContractError(f"stream label must be non-negative, got {label}")
        return int(label)
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    raise ContractError(f"stream label must be str or int, got {type(label).__name__}")


class PrngState:
    """Seeded random stream with named, independent substreams."""

    algorithm = "philox4x64"

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        if not isinstance(seed, (int, np.integer)):
            raise ContractError(f"seed must be an integer, got {type(seed).__name__}")
        if not 0 <= int(seed) < _U64:
            raise ContractError(f"seed must fit in u64, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(_spawn_key)
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key))
        )
        self.position = 0  # number of draw calls made on this stream

    def split(self, *labels) -> "PrngState":
        """Derive an independent child stream named by `labels`."""
        if not labels:
            raise ContractError("split() needs at least one label")
        key = self.spawn_key + tuple(_label_key(x) for x in labels)
        return PrngState(self.seed, key)

    # -- draws ------------------------------------------------------------
    # Every public draw bumps `position` by one call, giving a coarse
    # stream-position counter for checkpoint metadata.

    def random(self, size=None, dtype=np.float64):
        self.position += 1
        return self._gen.random(size=size, dtype=dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.position += 1
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.position += 1
        return self._gen.normal(loc, scale, size=size)

    def integers(self, low, high=None, size=None):
        self.position += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.position += 1
        return self._gen.permutation(n)

    def shuffle(self, seq: list) -> None:
        self.position += 1
        self._gen.shuffle(seq)

    def choice(self, options, p=None):
        self.position += 1
        return self._gen.choice(options, p=p)

    def __repr__(self):
        return f"PrngState({self.algorithm}, seed={self.seed}, key={self.spawn_key}, pos={self.position})"
