"""Seeded, platform-independent random streams.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's counter-based Philox generator. A stream is identified by a
64-bit seed plus an optional tuple of integer/string keys, so independent
draws (mask phases, per-batch noise, shuffles) never share state and can be
regenerated out of order, e.g. when resuming training.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "philox4x64-10/seedsequence"


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported stream key {key!r}")


class Rng:
    """Deterministic random stream keyed by ``(seed, *stream)``.

    Args:
        seed: 64-bit non-negative seed.
        *stream: extra integer or string keys selecting an independent
            sub-stream.
    """

    algorithm = ALGORITHM

    def __init__(self, seed: int, *stream):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(stream)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        entropy += [_key_to_int(k) for k in stream]
        self._bitgen = np.random.Philox(np.random.SeedSequence(entropy))
        self._gen = np.random.Generator(self._bitgen)
        self.draws = 0

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        self.draws += 1
        return self._gen.uniform(low, high, size)

    def normal(self, size=None) -> np.ndarray:
        self.draws += 1
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        self.draws += 1
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += 1
        return self._gen.permutation(n)

    def seed64(self) -> int:
        """Draw a fresh 64-bit seed for a child stream."""
        self.draws += 1
        return int(self._gen.integers(0, 2**63))

    def state(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "stream": [str(k) for k in self.stream],
            "draws": self.draws,
        }
