"""Training loop for the unfolded denoiser.

Each step draws clean images, a random task (operator + measurement noise)
per image and a diffusion noise level, forms ``y = A x + sigma_y n`` and
``x_t = x + sigma_t n'``, runs the K-step denoiser and descends on the
squared error under an uncertainty-weighted multi-task objective

    L = mean_i [ exp(-u(t_i)) * ||x_t^K - x||^2_i + u(t_i) ]

with ``u`` a small learned function of the diffusion time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .denoiser import ConditionalDenoiser, T_EMBED_DIM, denoise, level_embedding, noise_level
from .layers import Dense, Module
from .numerics import Param, Rng, Var, as_var, backward, ops, value_of, zero_grad
from .operators import (DenseOperator, IdentityOperator, LinearOperator, MaskSpec, make_gaussian_blur,
                        make_inpainting, make_mri, make_superres, measure)
from .schedules import NoiseSchedule, sample_sigma_train, t_of_sigma

U_CLAMP = 10.0
SIGMA_BUCKETS = (0.05, 0.2, 1.0, 5.0)
TASK_KINDS = ("deblur", "inpaint", "superres", "mri", "dense", "identity")


class TrainingDivergence(FloatingPointError):
    """Non-finite loss; ``snapshot`` holds the offending step's diagnostics."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class TaskPoolError(ValueError):
    pass


@dataclass
class TaskSpec:
    """A named operator factory plus its sampling weight.

    deblur:   size, sigma_lo, sigma_hi (anisotropic, random angle when the
              range is non-degenerate)
    inpaint:  drop_p (a number or a list to draw from)
    superres: factor
    mri:      pattern, acceleration, n_coils
    dense:    rows, seed (a fixed Gaussian matrix on the flattened image)
    identity: no parameters
    """

    kind: str
    weight: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskPoolError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if not self.weight > 0:
            raise TaskPoolError(f"task weight must be positive, got {self.weight}")


def default_task_pool() -> list[TaskSpec]:
    return [TaskSpec("deblur", 0.5, {"size": 9, "sigma_lo": 1.0, "sigma_hi": 2.0}),
            TaskSpec("inpaint", 0.5, {"drop_p": [0.2, 0.4]})]


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    total_steps: int = 5000
    sigma_y_range: tuple[float, float] = (0.0, 0.1)
    tasks: list[TaskSpec] = field(default_factory=default_task_pool)
    seed: int = 0
    ema_decay: float = 0.999
    log_every: int = 50
    checkpoint_every: int = 1000

    def __post_init__(self):
        lo, hi = self.sigma_y_range
        if not 0 <= lo <= hi:
            raise ValueError(f"sigma_y_range must satisfy 0 <= lo <= hi, got {self.sigma_y_range}")
        self.sigma_y_range = (float(lo), float(hi))
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")


def make_task_operator(spec: TaskSpec, shape, rng: Rng) -> LinearOperator:
    """Instantiate one operator for images of ``shape`` (C, H, W)."""
    p = spec.params
    shape = tuple(shape)
    hw = shape[-2:]
    if spec.kind == "deblur":
        lo, hi = p.get("sigma_lo", 1.0), p.get("sigma_hi", 2.0)
        if hi > lo:
            s1, s2 = rng.uniform(lo, hi), rng.uniform(lo, hi)
            angle = rng.uniform(0.0, math.pi)
        else:
            s1 = s2 = lo
            angle = 0.0
        return make_gaussian_blur(p.get("size", 9), float(s1), float(s2), float(angle), shape=shape)
    if spec.kind == "inpaint":
        drop = p.get("drop_p", 0.4)
        if isinstance(drop, (list, tuple)):
            drop = drop[int(rng.integers(0, len(drop)))]
        return make_inpainting(float(drop), shape, rng)
    if spec.kind == "superres":
        return make_superres(int(p.get("factor", 2)), shape=shape)
    if spec.kind == "mri":
        mask = MaskSpec(p.get("pattern", "gaussian1d"), acceleration=float(p.get("acceleration", 4.0)),
                        seed=rng.spawn_seed())
        return make_mri(hw, int(p.get("n_coils", 4)), mask, rng)
    if spec.kind == "dense":
        n = int(np.prod(shape))
        rows = int(p.get("rows", n))
        mat = Rng(int(p.get("seed", 0))).normal((rows, n)) / math.sqrt(n)
        return DenseOperator(mat, shape)
    return IdentityOperator(shape)


def sample_task(config: TrainConfig, rng: Rng, shape=(1, 64, 64)) -> tuple[LinearOperator, float]:
    """Draw a task by weight, build its operator with a fresh mask seed and
    draw ``sigma_y`` uniformly from ``config.sigma_y_range``."""
    pool = config.tasks
    if not pool:
        raise TaskPoolError("task pool is empty")
    w = np.array([t.weight for t in pool], dtype=np.float64)
    spec = pool[int(rng.choice(len(pool), p=w / w.sum()))]
    op = make_task_operator(spec, shape, rng)
    lo, hi = config.sigma_y_range
    sigma_y = float(rng.uniform(lo, hi)) if hi > lo else lo
    return op, sigma_y


def noising(x, sigma_t, rng: Rng) -> np.ndarray:
    """``x + sigma_t * n`` with ``n`` standard normal; ``sigma_t`` may be
    per-example (broadcast over the trailing axes)."""
    x = np.asarray(x)
    sig = np.asarray(sigma_t, dtype=np.float64)
    if np.any(sig < 0):
        raise ValueError("sigma_t must be non-negative")
    if sig.ndim:
        sig = sig.reshape((-1,) + (1,) * (x.ndim - 1))
    if not np.any(sig):
        return x.copy()
    n = rng.normal(x.shape)
    return (x + sig * n).astype(x.dtype, copy=False)


class UncertaintyHead(Module):
    """Log-variance ``u_t``: one hidden layer on a sinusoidal embedding of the
    noise level (see :func:`noise_level`), clamped to [-10, 10].  Starts at
    u = 0 everywhere."""

    def __init__(self, seed: int = 0, width: int = 64):
        rng = Rng(seed)
        self.hidden = Dense(T_EMBED_DIM, width, rng, "u.hidden")
        self.head = Dense(width, 1, rng, "u.head")
        self.head.w.value[...] = 0.0

    def __call__(self, level) -> Var:
        emb = level_embedding(level).astype(self.head.w.value.dtype)
        u = self.head(ops.silu(self.hidden(emb)))
        return ops.clip(ops.reshape(u, (-1,)), -U_CLAMP, U_CLAMP)


def multitask_loss(losses, t=None, head=None) -> Var:
    """``mean(exp(-u_t) * L + u_t)``.

    ``losses`` is a (B,) Var/array of per-example losses with matching ``t``,
    or a list of ``(loss, t)`` pairs.  ``head`` may be an UncertaintyHead,
    any callable ``t -> u`` or None (u = 0, giving the plain mean).
    """
    if isinstance(losses, (list, tuple)):
        if not losses:
            raise ValueError("multitask_loss needs at least one example")
        t = np.array([float(p[1]) for p in losses])
        losses = ops.concat([ops.reshape(as_var(p[0]), (1,)) for p in losses])
    losses = as_var(losses)
    if losses.value.size == 0:
        raise ValueError("multitask_loss needs at least one example")
    if np.any(losses.value < 0):
        raise ValueError("per-example losses must be non-negative")
    if head is None:
        return ops.mean(losses)
    u = head(t)
    u = ops.clip(as_var(u), -U_CLAMP, U_CLAMP)
    return ops.mean(ops.exp(-u) * losses + u)


class Adam:
    """Adam with bias correction; moment buffers keyed by Param name."""

    def __init__(self, params: Sequence[Param], lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        self.t += 1
        if self.lr == 0:
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in self.params:
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


@dataclass
class TrainState:
    step: int
    adam: Adam
    rng: Rng
    ema: dict[str, np.ndarray]
    bucket_sum: np.ndarray = field(default_factory=lambda: np.zeros(len(SIGMA_BUCKETS) + 1))
    bucket_count: np.ndarray = field(default_factory=lambda: np.zeros(len(SIGMA_BUCKETS) + 1))
    last_u: float = 0.0

    def bucket_means(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.bucket_sum / self.bucket_count

    def reset_buckets(self) -> None:
        self.bucket_sum[:] = 0
        self.bucket_count[:] = 0


def trainable(den: ConditionalDenoiser, head: UncertaintyHead | None) -> list[Param]:
    return den.parameters() + (head.parameters() if head is not None else [])


def init_state(config: TrainConfig, den: ConditionalDenoiser, head: UncertaintyHead | None = None) -> TrainState:
    params = trainable(den, head)
    return TrainState(step=0, adam=Adam(params, config.learning_rate), rng=Rng(config.seed),
                      ema={p.name: p.value.copy() for p in params})


def swap_in_ema(den: ConditionalDenoiser, ema: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Load EMA values into ``den``; returns the previous values for restoring."""
    old = {}
    for name, p in den.named_parameters().items():
        if name in ema:
            old[name] = p.value
            p.value = ema[name].astype(p.value.dtype, copy=True)
    return old


def _bucket(sigma: float) -> int:
    return int(np.searchsorted(SIGMA_BUCKETS, sigma))


def _as_images(dataset) -> np.ndarray:
    data = np.asarray(getattr(dataset, "items", dataset))
    if data.shape[0] == 0:
        raise ValueError("training dataset is empty")
    if data.ndim == 3:
        data = data[:, None]
    return data


def train_step(state: TrainState, config: TrainConfig, den: ConditionalDenoiser, dataset,
               schedule: NoiseSchedule, head: UncertaintyHead | None = None) -> float:
    """One Adam step on a fresh batch; returns the scalar objective."""
    data = _as_images(dataset)
    rng = state.rng
    dtype = den.reg.out.w.value.dtype
    b = config.batch_size
    x = data[rng.integers(0, data.shape[0], size=b)].astype(dtype)
    operators, metas = [], []
    for i in range(b):
        op, sigma_y = sample_task(config, rng, x.shape[1:])
        operators.append(op)
        metas.append(measure(op, x[i], sigma_y, rng))
    sigma = np.array([sample_sigma_train(schedule, rng) for _ in range(b)])
    t = np.asarray(t_of_sigma(schedule, sigma), dtype=np.float64).reshape(b)
    level = noise_level(sigma)
    x_t = noising(x, sigma, rng)

    out = denoise(den, x_t, metas, operators, sigma, t)
    per = ops.per_example_sum_squares(out - x)
    loss = multitask_loss(per, level, head)
    value = float(loss.value)
    if not math.isfinite(value):
        raise TrainingDivergence(
            f"non-finite loss at step {state.step}",
            {"step": state.step, "sigma_t": sigma.tolist(), "t": t.tolist(),
             "per_example": value_of(per).tolist(), "operators": [op.op_id for op in operators]})

    zero_grad(state.adam.params)
    backward(loss)
    state.adam.step()
    d = config.ema_decay
    for p in state.adam.params:
        e = state.ema[p.name]
        e *= d
        e += (1 - d) * p.value
    per_v = value_of(per)
    for s, l in zip(sigma, per_v):
        k = _bucket(float(s))
        state.bucket_sum[k] += float(l)
        state.bucket_count[k] += 1
    state.last_u = float(np.mean(value_of(head(level)))) if head is not None else 0.0
    state.step += 1
    return value


CSV_HEADER = ["step", "loss"] + [f"loss_sigma_b{i}" for i in range(len(SIGMA_BUCKETS) + 1)] + ["mean_u"]


def fit(config: TrainConfig, den: ConditionalDenoiser, dataset, schedule: NoiseSchedule,
        head: UncertaintyHead | None = None, state: TrainState | None = None, log_path=None,
        on_checkpoint: Callable[[TrainState], None] | None = None) -> tuple[TrainState, list[float]]:
    """Run ``config.total_steps`` steps (resuming from ``state`` if given).

    A CSV row (step, loss, per-sigma-bucket mean loss, mean u) is written
    every ``log_every`` steps; ``on_checkpoint`` fires every
    ``checkpoint_every`` steps and at the end.
    """
    state = state or init_state(config, den, head)
    losses: list[float] = []
    writer, fh = None, None
    if log_path is not None:
        fh = open(log_path, "a" if state.step else "w", newline="")
        writer = csv.writer(fh)
        if not state.step:
            writer.writerow(CSV_HEADER)
    try:
        while state.step < config.total_steps:
            losses.append(train_step(state, config, den, dataset, schedule, head))
            if writer is not None and state.step % config.log_every == 0:
                window = losses[-config.log_every:]
                writer.writerow([state.step, f"{np.mean(window):.6g}"]
                                + [f"{v:.6g}" for v in state.bucket_means()] + [f"{state.last_u:.6g}"])
                fh.flush()
                state.reset_buckets()
            if on_checkpoint is not None and state.step % config.checkpoint_every == 0:
                on_checkpoint(state)
        if on_checkpoint is not None and state.step % config.checkpoint_every:
            on_checkpoint(state)
    finally:
        if fh is not None:
            fh.close()
    return state, losses
