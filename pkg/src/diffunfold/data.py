"""Toy datasets: synthetic generators, PNG folders, percentile normalisation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numerics import Rng
from .oracle import GaussianPriorSpec

SYNTHETIC_KINDS = ("grf", "shapes", "gauss1d")


class DataError(ValueError):
    """Unreadable, inconsistent or degenerate input data."""


@dataclass
class ImageDataset:
    items: np.ndarray
    provenance: str

    def __post_init__(self):
        self.items = np.asarray(self.items)
        if self.items.shape[0] == 0:
            raise DataError("dataset is empty")

    def __len__(self) -> int:
        return self.items.shape[0]

    @property
    def channels(self) -> int:
        return self.items.shape[1] if self.items.ndim == 4 else 1


def _grf(n: int, size: int, rng: Rng, length_scale: float) -> np.ndarray:
    noise = rng.normal((n, size, size))
    f = np.fft.fftfreq(size)
    k2 = f[:, None] ** 2 + f[None, :] ** 2
    filt = np.exp(-2 * (np.pi * length_scale) ** 2 * k2)
    field = np.fft.ifft2(np.fft.fft2(noise) * filt).real
    lo = field.min(axis=(1, 2), keepdims=True)
    hi = field.max(axis=(1, 2), keepdims=True)
    return (field - lo) / np.maximum(hi - lo, 1e-12)


def _shapes(n: int, size: int, rng: Rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, size, size))
    for i in range(n):
        img = np.full((size, size), rng.uniform(0.0, 0.2))
        for _ in range(int(rng.integers(2, 6))):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            ry, rx = rng.uniform(0.06, 0.3, size=2)
            val = rng.uniform(0.3, 1.0)
            if rng.uniform() < 0.5:
                th = rng.uniform(0, np.pi)
                u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
                v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
                inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
            else:
                inside = (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
            img[inside] = val
        out[i] = img
    return np.clip(out, 0.0, 1.0)


def gen_synthetic(kind: str, n: int, size: int, rng: Rng, prior: GaussianPriorSpec | None = None,
                  length_scale: float | None = None) -> ImageDataset:
    """``grf``: smoothed Gaussian random fields, min-max scaled to [0, 1].
    ``shapes``: random ellipses and rectangles on a dark background.
    ``gauss1d``: ``n`` vectors drawn from ``prior`` (``size`` is ignored).
    Image kinds return items of shape (n, 1, size, size)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind == "grf":
        items = _grf(n, size, rng, length_scale or size / 16)[:, None]
    elif kind == "shapes":
        items = _shapes(n, size, rng)[:, None]
    elif kind == "gauss1d":
        prior = prior or GaussianPriorSpec(np.zeros(1), np.eye(1))
        items = prior.sample(rng, n)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    return ImageDataset(items, f"synthetic:{kind}")


class Normalized(NamedTuple):
    data: np.ndarray
    scale: float


def normalize_percentile(data, p: float = 99.0) -> Normalized:
    """Divide by the p-th percentile of |data|; keep the scale for inversion."""
    data = np.asarray(data)
    if data.size == 0:
        raise DataError("cannot normalise empty data")
    if not 0 < p <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {p}")
    scale = float(np.percentile(np.abs(data), p))
    if scale == 0 or not np.isfinite(scale):
        raise DataError(f"{p}th percentile of |data| is {scale}; cannot normalise")
    return Normalized(data / scale, scale)


def denormalize(data, scale: float) -> np.ndarray:
    return np.asarray(data) * scale


def load_images(path) -> ImageDataset:
    """All ``*.png`` files of a directory, sorted by name, scaled to [0, 1].

    8-bit data divide by 255, 16-bit by 65535.  Grayscale stays (N, 1, H, W),
    RGB becomes (N, 3, H, W)."""
    from PIL import Image

    if not os.path.isdir(path):
        raise DataError(f"{path} is not a directory")
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))
    if not names:
        raise DataError(f"no PNG files in {path}")
    arrays, errors = [], []
    for name in names:
        full = os.path.join(path, name)
        try:
            with Image.open(full) as im:
                arr = np.array(im)
        except Exception as exc:  # Pillow raises several unrelated types
            errors.append(f"{name}: {exc}")
            continue
        if arr.dtype == np.uint8:
            arr = arr / 255.0
        elif arr.dtype in (np.uint16, np.int32, np.int16) or im.mode.startswith("I"):
            arr = arr.astype(np.float64) / 65535.0
        else:
            errors.append(f"{name}: unsupported pixel type {arr.dtype}")
            continue
        if arr.ndim == 3:
            arr = arr[..., :3].transpose(2, 0, 1)
        else:
            arr = arr[None]
        arrays.append((name, arr))
    if errors:
        raise DataError("unreadable files: " + "; ".join(errors))
    ref = arrays[0][1].shape
    bad = [n for n, a in arrays if a.shape != ref]
    if bad:
        raise DataError(f"mixed image dimensions (expected {ref}): " + ", ".join(bad))
    return ImageDataset(np.stack([a for _, a in arrays]), f"folder:{os.path.abspath(path)}")


def save_png(path, img, bits: int = 8) -> None:
    """Write a [0, 1] image of shape (H, W) or (1, H, W) as grayscale PNG."""
    from PIL import Image

    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3:
        img = img[0]
    if bits == 8:
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)
    elif bits == 16:
        Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")
