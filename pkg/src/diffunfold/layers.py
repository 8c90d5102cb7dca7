"""Small parameter containers built on the tape: dense layers, 3x3 convs,
sinusoidal embeddings."""

from __future__ import annotations

import math

import numpy as np

from .numerics import Param, Rng, ops


class Module:
    """Anything owning Params; ``parameters()`` walks attributes in a fixed order."""

    def parameters(self) -> list[Param]:
        out: list[Param] = []
        seen: set[int] = set()
        for key in sorted(vars(self)):
            _collect(getattr(self, key), out, seen)
        return out

    def named_parameters(self) -> dict[str, Param]:
        return {p.name: p for p in self.parameters()}

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self


def _collect(obj, out, seen):
    if isinstance(obj, Param):
        if id(obj) not in seen:
            seen.add(id(obj))
            out.append(obj)
    elif isinstance(obj, Module):
        for p in obj.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            _collect(item, out, seen)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, name: str, scale: float = 1.0):
        self.w = Param(rng.normal((n_in, n_out)) * scale / math.sqrt(n_in), f"{name}.w")
        self.b = Param(np.zeros(n_out), f"{name}.b")

    def __call__(self, x):
        return ops.matmul(x, self.w) + self.b


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, name: str, k: int = 3, scale: float = 1.0):
        fan_in = c_in * k * k
        self.w = Param(rng.normal((c_out, c_in, k, k)) * scale * math.sqrt(2.0 / fan_in), f"{name}.w")
        self.b = Param(np.zeros(c_out), f"{name}.b")

    def __call__(self, x):
        return ops.conv2d(x, self.w, self.b)


def sinusoidal_embedding(values, dim: int = 16, lo: float = 1.0, hi: float = 1000.0) -> np.ndarray:
    """[sin(f v), cos(f v)] for ``dim/2`` geometric frequencies in [lo, hi]."""
    v = np.atleast_1d(np.asarray(values, dtype=np.float64))
    freqs = np.geomspace(lo, hi, dim // 2)
    arg = v[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)
