"""Noise levels, step grids and network preconditioning.

Four families are supported: EDM, VE, VP and iDDPM.  Time is normalised to
``t in [0, 1]`` with ``sigma_at(0) = sigma_min`` and ``sigma_at(1) =
sigma_max``.  Preconditioning coefficients follow the per-family table of
Karras et al. (2022); the constants there are the defaults here.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng

FAMILIES = ("EDM", "VE", "VP", "iDDPM")

IDDPM_STEPS = 1000
IDDPM_C1 = 0.001
IDDPM_C2 = 0.008


def _iddpm_table(m: int = IDDPM_STEPS) -> np.ndarray:
    """Increasing noise levels u_j of the cosine schedule, j = M ... 0."""
    return _iddpm_table_cached(m).copy()


@lru_cache(maxsize=4)
def _iddpm_table_cached(m: int) -> np.ndarray:

    def alpha_bar(j):
        return math.sin(0.5 * math.pi * j / m / (IDDPM_C2 + 1)) ** 2

    u = np.zeros(m + 1)
    for j in range(m, 0, -1):
        u[j - 1] = math.sqrt((u[j] ** 2 + 1) / max(alpha_bar(j - 1) / alpha_bar(j), IDDPM_C1) - 1)
    return u[::-1].copy()  # ascending; index 0 is u_M = 0


@dataclass
class NoiseSchedule:
    family: str = "EDM"
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    beta_min: float = 0.1
    beta_max: float = 19.9
    p_mean: float = -1.2
    p_std: float = 1.2
    _vp_s0: float = field(default=0.0, init=False, repr=False)
    _iddpm_u: np.ndarray | None = field(default=None, init=False, repr=False)
    _knots: tuple | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown schedule family {self.family!r}; expected one of {FAMILIES}")
        if not 0 < self.sigma_min:
            raise ValueError("sigma_min must be positive")
        if self.family == "VP":
            # VP time s in [s0, 1]; sigma_max is implied by the beta schedule.
            self._vp_s0 = self._vp_time(self.sigma_min)
            self.sigma_max = self._vp_sigma(1.0)
        if self.family == "iDDPM":
            u = _iddpm_table()
            self._iddpm_u = u[(u > self.sigma_min) & (u < self.sigma_max)]
        if not self.sigma_max > self.sigma_min:
            raise ValueError("sigma_max must exceed sigma_min")

    # -- VP helpers
    def _vp_sigma(self, s):
        bd = self.beta_max - self.beta_min
        return np.sqrt(np.expm1(0.5 * bd * s * s + self.beta_min * s))

    def _vp_time(self, sigma):
        bd = self.beta_max - self.beta_min
        c = np.log1p(np.square(sigma))
        return (np.sqrt(self.beta_min ** 2 + 2 * bd * c) - self.beta_min) / bd

    def _iddpm_grid(self):
        """(t, log sigma) knots for the monotone interpolant."""
        if self._knots is None:
            self._knots = self._make_knots()
        return self._knots

    def _make_knots(self):
        logs = np.concatenate([[math.log(self.sigma_min)], np.log(self._iddpm_u),
                               [math.log(self.sigma_max)]])
        ts = np.linspace(0.0, 1.0, logs.size)
        return ts, logs


def sigma_at(schedule: NoiseSchedule, t):
    """Noise level at normalised time ``t`` (scalar or array)."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1) or np.any(np.isnan(t_arr)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    s = schedule
    if s.family == "EDM":
        out = s.sigma_min + t_arr * (s.sigma_max - s.sigma_min)
    elif s.family == "VE":
        out = s.sigma_min * (s.sigma_max / s.sigma_min) ** t_arr
    elif s.family == "VP":
        out = s._vp_sigma(s._vp_s0 + t_arr * (1.0 - s._vp_s0))
        out = np.where(t_arr == 0, s.sigma_min, np.where(t_arr == 1, s.sigma_max, out))
    else:
        ts, logs = s._iddpm_grid()
        out = np.exp(np.interp(t_arr, ts, logs))
        out = np.where(t_arr == 0, s.sigma_min, np.where(t_arr == 1, s.sigma_max, out))
    return float(out) if np.ndim(out) == 0 else out


def t_of_sigma(schedule: NoiseSchedule, sigma):
    """Inverse of :func:`sigma_at`, clamped to [0, 1]."""
    s = schedule
    sig = np.clip(np.asarray(sigma, dtype=np.float64), s.sigma_min, s.sigma_max)
    if s.family == "EDM":
        out = (sig - s.sigma_min) / (s.sigma_max - s.sigma_min)
    elif s.family == "VE":
        out = np.log(sig / s.sigma_min) / math.log(s.sigma_max / s.sigma_min)
    elif s.family == "VP":
        out = (s._vp_time(sig) - s._vp_s0) / (1.0 - s._vp_s0)
    else:
        ts, logs = s._iddpm_grid()
        out = np.interp(np.log(sig), logs, ts)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class StepGrid:
    sigmas: np.ndarray

    @property
    def nfe(self) -> int:
        return len(self.sigmas) - 1


def step_grid(schedule: NoiseSchedule, nfe: int) -> StepGrid:
    """Decreasing noise levels of length ``nfe + 1`` ending in exactly 0."""
    if int(nfe) != nfe or nfe < 1:
        raise ValueError(f"nfe must be a positive integer, got {nfe}")
    nfe = int(nfe)
    s = schedule
    if nfe == 1:
        head = np.array([s.sigma_max])
    elif s.family == "EDM":
        i = np.arange(nfe)
        inv = 1.0 / s.rho
        head = (s.sigma_max ** inv + i / (nfe - 1) * (s.sigma_min ** inv - s.sigma_max ** inv)) ** s.rho
        head[0], head[-1] = s.sigma_max, s.sigma_min
    else:
        head = np.asarray(sigma_at(s, np.linspace(1.0, 0.0, nfe)), dtype=np.float64)
    return StepGrid(np.append(head, 0.0))


@dataclass(frozen=True)
class Preconditioner:
    sigma_data: float = 0.5
    family: str = "EDM"
    schedule: NoiseSchedule | None = None

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")


def precondition_coeffs(pre: Preconditioner, sigma):
    """(c_skip, c_out, c_in, c_noise) for noise level ``sigma`` (scalar or array).

    EDM:   c_skip = sd^2/(s^2+sd^2), c_out = s*sd/sqrt(s^2+sd^2),
           c_in = 1/sqrt(s^2+sd^2), c_noise = ln(s)/4
    VE:    c_skip = 1, c_out = s, c_in = 1, c_noise = ln(s/2)
    VP:    c_skip = 1, c_out = -s, c_in = 1/sqrt(s^2+1), c_noise = (M-1) * t_vp(s)
    iDDPM: c_skip = 1, c_out = -s, c_in = 1/sqrt(s^2+1), c_noise = M-1-argmin_j |u_j - s|
    c_noise is NaN at s = 0 where it is undefined (the network output is
    multiplied by c_out = 0 there).
    """
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s < 0) or np.any(np.isnan(s)):
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    fam = pre.family
    with np.errstate(divide="ignore", invalid="ignore"):
        if fam == "EDM":
            sd = pre.sigma_data
            r = np.sqrt(s * s + sd * sd)
            c_skip, c_out, c_in = sd * sd / (r * r), s * sd / r, 1.0 / r
            c_noise = np.where(s > 0, np.log(np.where(s > 0, s, 1.0)) / 4.0, np.nan)
        elif fam == "VE":
            c_skip, c_out, c_in = np.ones_like(s), s.copy(), np.ones_like(s)
            c_noise = np.where(s > 0, np.log(np.where(s > 0, s, 1.0) / 2.0), np.nan)
        else:
            c_skip, c_out, c_in = np.ones_like(s), -s, 1.0 / np.sqrt(s * s + 1.0)
            m = IDDPM_STEPS
            if fam == "VP":
                sched = pre.schedule or NoiseSchedule("VP")
                c_noise = (m - 1) * sched._vp_time(s)
            else:
                u = _iddpm_table()
                idx = np.abs(u[None, :] - s.reshape(-1, 1)).argmin(axis=1).reshape(s.shape)
                # u ascending here, so descending index j = M - idx
                c_noise = (m - 1 - (m - idx)).astype(np.float64)
            c_noise = np.where(s > 0, c_noise, np.nan)
    out = (c_skip, c_out, c_in, c_noise)
    if s.ndim == 0:
        return tuple(float(v) for v in out)
    return out


def sample_sigma_train(schedule: NoiseSchedule, rng: Rng) -> float:
    """Training noise level: log-normal for EDM, uniform time otherwise."""
    s = schedule
    if s.family == "EDM":
        sig = math.exp(s.p_mean + s.p_std * float(rng.normal()))
        return float(min(max(sig, s.sigma_min), s.sigma_max))
    return float(sigma_at(s, float(rng.uniform())))
