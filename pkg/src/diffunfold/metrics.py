"""PSNR, SSIM and per-image metric reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class PSNRValue(float):
    """A PSNR in dB; ``capped`` is set when the inputs matched exactly."""

    capped: bool

    def __new__(cls, value: float, capped: bool = False):
        obj = super().__new__(cls, value)
        obj.capped = capped
        return obj


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, peak: float = 1.0) -> PSNRValue:
    """``10 log10(peak^2 / MSE)``; an exact match reports 99 dB with ``capped``."""
    x, ref = _pair(x, ref)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return PSNRValue(PSNR_CAP, capped=True)
    return PSNRValue(min(10.0 * math.log10(peak * peak / mse), PSNR_CAP), capped=False)


def _ssim_2d(x: np.ndarray, ref: np.ndarray, peak: float) -> float:
    w = SSIM_WINDOW
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    n = w * w
    px = sliding_window_view(x, (w, w))
    pr = sliding_window_view(ref, (w, w))
    mx = px.mean(axis=(-2, -1))
    mr = pr.mean(axis=(-2, -1))
    # unbiased (sample) covariances, as in the usual 7x7 uniform-window SSIM
    vx = (px ** 2).mean(axis=(-2, -1)) - mx ** 2
    vr = (pr ** 2).mean(axis=(-2, -1)) - mr ** 2
    cxr = (px * pr).mean(axis=(-2, -1)) - mx * mr
    corr = n / (n - 1)
    vx, vr, cxr = vx * corr, vr * corr, cxr * corr
    num = (2 * mx * mr + c1) * (2 * cxr + c2)
    den = (mx ** 2 + mr ** 2 + c1) * (vx + vr + c2)
    return float(np.mean(num / den))


def ssim(x, ref, peak: float = 1.0) -> float:
    """Mean SSIM over all valid 7x7 windows (uniform weights, K1 = 0.01,
    K2 = 0.03, dynamic range ``peak``); channels are averaged."""
    x, ref = _pair(x, ref)
    if x.ndim < 2 or x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    xs = x.reshape((-1,) + x.shape[-2:])
    rs = ref.reshape((-1,) + ref.shape[-2:])
    return float(np.mean([_ssim_2d(a, b, peak) for a, b in zip(xs, rs)]))


@dataclass
class MetricReport:
    fingerprint: str = ""
    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    capped: list[bool] = field(default_factory=list)

    def add(self, name: str, x, ref, peak: float = 1.0) -> None:
        p = psnr(x, ref, peak)
        s = ssim(x, ref, peak)
        if not -1.0 <= s <= 1.0 + 1e-12:
            raise ValueError(f"SSIM {s} outside [-1, 1]")
        self.names.append(name)
        self.psnr.append(float(p))
        self.ssim.append(s)
        self.capped.append(p.capped)

    def summary(self) -> dict:
        p, s = np.array(self.psnr), np.array(self.ssim)
        return {"n": len(self.names), "psnr_mean": float(p.mean()) if p.size else math.nan,
                "psnr_std": float(p.std()) if p.size else math.nan,
                "ssim_mean": float(s.mean()) if s.size else math.nan,
                "ssim_std": float(s.std()) if s.size else math.nan,
                "any_capped": bool(any(self.capped)), "fingerprint": self.fingerprint}

    def rows(self):
        for n, p, s, c in zip(self.names, self.psnr, self.ssim, self.capped):
            yield {"name": n, "psnr": p, "ssim": s, "capped": c}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["name", "psnr", "ssim", "capped"])
            w.writeheader()
            for r in self.rows():
                w.writerow(r)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for r in self.rows():
                f.write(json.dumps(r) + "\n")
            f.write(json.dumps({"summary": self.summary()}) + "\n")
