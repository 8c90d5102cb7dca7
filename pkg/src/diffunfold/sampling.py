"""Reverse diffusion driven by the conditional denoiser.

Starting from ``x_T ~ N(0, sigma_max^2 I)``, every step queries
``D(x; sigma, y)`` and moves to the next grid level:

* EDM: Euler along ``dx/dsigma = (x - D) / sigma`` with optional churn and
  a Heun correction (skipped on the final step to sigma = 0).
* VE: Euler-Maruyama on the reverse-time SDE with score ``(D - x)/sigma^2``.
* VP, iDDPM: the ancestral Gaussian posterior ``q(x_next | x, x0 = D)`` of
  the noising chain, expressed in sigma-space.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Rng
from .schedules import FAMILIES, NoiseSchedule, StepGrid, step_grid, t_of_sigma


class SamplerStateError(IndexError):
    pass


@dataclass
class SamplerConfig:
    family: str = "EDM"
    nfe: int = 18
    s_churn: float = 0.0
    s_tmin: float = 0.0
    s_tmax: float = math.inf
    s_noise: float = 1.0
    second_order: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown sampler family {self.family!r}")
        if int(self.nfe) != self.nfe or self.nfe < 1:
            raise ValueError(f"nfe must be a positive integer, got {self.nfe}")
        self.nfe = int(self.nfe)
        if self.s_churn < 0 or self.s_noise < 0:
            raise ValueError("s_churn and s_noise must be non-negative")

    @property
    def stochastic(self) -> bool:
        return self.family != "EDM" or self.s_churn > 0


@dataclass
class SamplerState:
    x: np.ndarray
    i: int
    rng: Rng


def init_state(schedule: NoiseSchedule, shape, rng: Rng, dtype=np.float64) -> SamplerState:
    """``x_T = sigma_max * n``."""
    x = (schedule.sigma_max * rng.normal(tuple(shape))).astype(dtype, copy=False)
    return SamplerState(x=x, i=0, rng=rng)


def _denoise(den, x, meas, op, sigma: float, schedule: NoiseSchedule | None):
    t = t_of_sigma(schedule, sigma) if schedule is not None else 1.0
    return np.asarray(den.denoise(x, meas, op, float(sigma), t))


def reverse_step(state: SamplerState, den, meas, op, grid: StepGrid, config: SamplerConfig,
                 schedule: NoiseSchedule | None = None) -> SamplerState:
    """Advance ``state`` from ``grid.sigmas[i]`` to ``grid.sigmas[i + 1]`` (in place)."""
    i = state.i
    if not 0 <= i < grid.nfe:
        raise SamplerStateError(f"step index {i} outside [0, {grid.nfe})")
    sig, sig_next = float(grid.sigmas[i]), float(grid.sigmas[i + 1])
    x = state.x
    fam = config.family

    if fam == "EDM":
        gamma = 0.0
        if config.s_churn > 0 and config.s_tmin <= sig <= config.s_tmax:
            gamma = min(config.s_churn / grid.nfe, math.sqrt(2.0) - 1.0)
        sig_hat = sig * (1.0 + gamma)
        if gamma > 0:
            lift = math.sqrt(sig_hat ** 2 - sig ** 2) * config.s_noise
            x = x + lift * state.rng.normal(x.shape).astype(x.dtype, copy=False)
        d = (x - _denoise(den, x, meas, op, sig_hat, schedule)) / sig_hat
        x_next = x + (sig_next - sig_hat) * d
        if config.second_order and sig_next > 0:
            d2 = (x_next - _denoise(den, x_next, meas, op, sig_next, schedule)) / sig_next
            x_next = x + (sig_next - sig_hat) * 0.5 * (d + d2)
    else:
        x0 = _denoise(den, x, meas, op, sig, schedule)
        var_drop = sig ** 2 - sig_next ** 2
        if fam == "VE":
            score = (x0 - x) / sig ** 2
            x_next = x + var_drop * score
            if sig_next > 0:
                x_next = x_next + math.sqrt(var_drop) * state.rng.normal(x.shape).astype(x.dtype, copy=False)
        else:
            ratio = sig_next ** 2 / sig ** 2
            x_next = x0 + ratio * (x - x0)
            if sig_next > 0:
                std = sig_next * math.sqrt(var_drop) / sig
                x_next = x_next + std * state.rng.normal(x.shape).astype(x.dtype, copy=False)
    state.x = np.asarray(x_next, dtype=state.x.dtype)
    state.i = i + 1
    return state


def expected_regularizer_calls(config: SamplerConfig, K: int) -> int:
    """Regulariser evaluations of one trajectory (the grid ends at sigma = 0)."""
    if config.family == "EDM" and config.second_order:
        return (2 * config.nfe - 1) * K
    return config.nfe * K


def _default_shape(op, meas):
    if isinstance(op, (list, tuple)):
        return (len(op),) + tuple(op[0].input_shape)
    return tuple(op.input_shape)


def sample(meas, op, den, schedule: NoiseSchedule, config: SamplerConfig | None = None, *,
           shape=None, rng: Rng | None = None, x_init: np.ndarray | None = None,
           dump_dir: str | os.PathLike | None = None,
           on_step: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Run ``config.nfe`` reverse steps and return ``x_0``.

    ``den`` is anything with ``denoise(x, meas, op, sigma, t)``.  ``op`` may be
    one operator or a list with one per batch element.  With ``dump_dir`` set,
    ``step_XXX.npy`` holds the state after each step.
    """
    config = config or SamplerConfig()
    if schedule.family != config.family:
        schedule = NoiseSchedule(config.family) if config.family != "EDM" else schedule
    grid = step_grid(schedule, config.nfe)
    rng = rng or Rng(config.seed)
    if x_init is not None:
        state = SamplerState(x=np.array(x_init), i=0, rng=rng)
    else:
        shape = tuple(shape) if shape is not None else _default_shape(op, meas)
        state = init_state(schedule, shape, rng)
    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)
    while state.i < grid.nfe:
        reverse_step(state, den, meas, op, grid, config, schedule)
        if dump_dir is not None:
            np.save(os.path.join(dump_dir, f"step_{state.i:03d}.npy"), state.x)
        if on_step is not None:
            on_step(state.i, state.x)
    return state.x
