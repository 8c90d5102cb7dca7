"""Seeded, counter-based randomness.

Draws come from numpy's Philox generator, whose stream is fully determined
by (seed, call sequence) and does not depend on the platform.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Counter-based random stream with an explicit 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=dtype)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        return self._gen.uniform(lo, hi, size=size)

    def integers(self, lo: int, hi: int | None = None, size=None):
        return self._gen.integers(lo, hi, size=size)

    def choice(self, n: int, size=None, replace: bool = True, p=None):
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def spawn_seed(self) -> int:
        """Draw a fresh 63-bit seed for a child stream (e.g. a mask)."""
        return int(self._gen.integers(0, 2**63 - 1))

    def spawn(self) -> "Rng":
        return Rng(self.spawn_seed())

    # Philox state is six small integer fields; flatten to uint64 for storage.
    def get_state(self) -> np.ndarray:
        st = self._gen.bit_generator.state
        s = st["state"]
        return np.array(
            [*np.asarray(s["counter"], dtype=np.uint64), *np.asarray(s["key"], dtype=np.uint64),
             *np.asarray(st["buffer"], dtype=np.uint64), st["buffer_pos"], st["has_uint32"],
             st["uinteger"], self.seed],
            dtype=np.uint64,
        )

    def set_state(self, arr: np.ndarray) -> None:
        arr = np.asarray(arr, dtype=np.uint64)
        if arr.shape != (14,):
            raise ValueError(f"bad rng state shape {arr.shape}")
        self.seed = int(arr[13])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {"counter": arr[0:4].copy(), "key": arr[4:6].copy()},
            "buffer": arr[6:10].copy(),
            "buffer_pos": int(arr[10]),
            "has_uint32": int(arr[11]),
            "uinteger": int(arr[12]),
        }

    @classmethod
    def from_state(cls, arr: np.ndarray) -> "Rng":
        r = cls(0)
        r.set_state(arr)
        return r


def randn(rng: Rng, shape=(), dtype=np.float64) -> np.ndarray:
    """i.i.d. standard normal draws; ``shape=()`` yields a 0-d array."""
    return rng.normal(shape, dtype=dtype)
