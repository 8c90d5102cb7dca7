"""Config-driven assembly of models, datasets, training runs and evaluation."""

from __future__ import annotations

import os
import time

import numpy as np

from .checkpoint import Checkpoint, capture, load_checkpoint, restore_params, restore_state, save_checkpoint
from .config import Config
from .data import ImageDataset, gen_synthetic, load_images
from .denoiser import ConditionalDenoiser
from .metrics import MetricReport, psnr
from .numerics import Rng
from .operators import LinearOperator, measure
from .sampling import SamplerConfig, sample
from .schedules import NoiseSchedule, Preconditioner
from .training import TaskSpec, TrainConfig, UncertaintyHead, fit, init_state, make_task_operator


def schedule_of(cfg: Config) -> NoiseSchedule:
    s = cfg.schedule
    return NoiseSchedule(s.family, s.sigma_min, s.sigma_max, s.rho, p_mean=s.p_mean, p_std=s.p_std)


def sampler_of(cfg: Config, seed: int | None = None) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(s.family, s.nfe, s.s_churn, s.s_tmin, s.s_tmax, s.s_noise, s.second_order,
                         cfg.seed if seed is None else seed)


def train_config_of(cfg: Config) -> TrainConfig:
    t = cfg.training
    return TrainConfig(t.learning_rate, t.batch_size, t.total_steps, tuple(t.sigma_y_range),
                       cfg.task_specs("training"), cfg.seed, t.ema_decay, t.log_every, t.checkpoint_every)


def build_model(cfg: Config, image_shape=None) -> tuple[ConditionalDenoiser, UncertaintyHead]:
    d = cfg.denoiser
    shape = image_shape or (1, cfg.data.size, cfg.data.size)
    pre = Preconditioner(d.sigma_data, cfg.schedule.family, schedule_of(cfg))
    den = ConditionalDenoiser(d.K, shape[0], tuple(d.channels), pre, seed=cfg.seed, untied=d.untied)
    rng = Rng(cfg.seed + 1)
    probes = [make_task_operator(spec, shape, rng) for spec in cfg.task_specs("training") for _ in range(4)]
    den.init_gamma(probes, d.gamma_target, d.gamma_tau_init)
    head = UncertaintyHead(seed=cfg.seed + 2)
    dtype = np.dtype(d.dtype)
    return den.astype(dtype), head.astype(dtype)


def build_datasets(cfg: Config) -> tuple[ImageDataset, ImageDataset]:
    """(train, held-out eval).  Synthetic sets use disjoint seeds."""
    d = cfg.data
    if d.kind == "folder":
        full = load_images(d.path)
        n_eval = min(d.n_eval, len(full) - 1)
        if n_eval < 1:
            raise ValueError("a folder dataset needs at least two images")
        return (ImageDataset(full.items[:-n_eval], full.provenance),
                ImageDataset(full.items[-n_eval:], full.provenance))
    train = gen_synthetic(d.kind, d.n_train, d.size, Rng(cfg.seed + 1000))
    held = gen_synthetic(d.kind, d.n_eval, d.size, Rng(d.eval_seed))
    return train, held


def checkpoint_path(out_dir) -> str:
    return os.path.join(out_dir, "checkpoint.duck")


def train(cfg: Config, out_dir, resume: bool = True, log=print) -> tuple[ConditionalDenoiser, UncertaintyHead, Checkpoint]:
    """Train per ``cfg``; writes ``train_log.csv`` and periodic checkpoints.
    An existing checkpoint with the same fingerprint is resumed."""
    os.makedirs(out_dir, exist_ok=True)
    train_set, _ = build_datasets(cfg)
    den, head = build_model(cfg, train_set.items.shape[1:])
    tc = train_config_of(cfg)
    state = init_state(tc, den, head)
    path = checkpoint_path(out_dir)
    fp = cfg.fingerprint
    spent = 0.0
    if resume and os.path.exists(path):
        ck = load_checkpoint(path, expected_fingerprint=fp)
        if ck.fingerprint == fp and ck.optimizer is not None:
            restore_params(ck, [den, head])
            restore_state(ck, state)
            spent = float(ck.meta.get("wall_seconds", np.zeros(1))[0])
            log(f"resumed from step {state.step}")
    start = time.perf_counter()

    def snapshot(st):
        ck = capture(fp, [den, head], st)
        ck.meta["wall_seconds"] = np.array([spent + time.perf_counter() - start])
        return ck

    def on_ckpt(st):
        save_checkpoint(path, snapshot(st))
        log(f"step {st.step}: checkpoint written")

    fit(tc, den, train_set.items, schedule_of(cfg), head, state=state,
        log_path=os.path.join(out_dir, "train_log.csv"), on_checkpoint=on_ckpt)
    ck = snapshot(state)
    save_checkpoint(path, ck)
    return den, head, ck


def load_model(cfg: Config, ckpt_path, use_ema: bool = True, image_shape=None) -> ConditionalDenoiser:
    den, head = build_model(cfg, image_shape)
    ck = load_checkpoint(ckpt_path, expected_fingerprint=cfg.fingerprint)
    restore_params(ck, [den, head], use_ema=use_ema)
    return den


def reconstruct(den, images: np.ndarray, operators: list[LinearOperator], sigma_y: float,
                schedule: NoiseSchedule, sampler: SamplerConfig, rng: Rng):
    """Measure each image with its operator, then sample.  Returns
    (reconstructions, adjoint baselines A^T y) as float64 arrays."""
    metas = [measure(op, x, sigma_y, rng) for op, x in zip(operators, images)]
    baseline = np.stack([op.adjoint(m.y) for op, m in zip(operators, metas)]).astype(np.float64)
    dtype = den.reg.out.w.value.dtype if hasattr(den, "reg") else np.float64
    x_t = schedule.sigma_max * rng.normal(images.shape)
    out = sample(metas, operators, den, schedule, sampler, x_init=x_t.astype(dtype))
    return np.asarray(out, dtype=np.float64), baseline


def evaluate_task(den, images: np.ndarray, spec: TaskSpec, sigma_y: float, schedule: NoiseSchedule,
                  sampler: SamplerConfig, seed: int = 0, name: str | None = None) -> dict:
    rng = Rng(seed)
    operators = [make_task_operator(spec, images.shape[1:], rng) for _ in range(images.shape[0])]
    recon, base = reconstruct(den, images, operators, sigma_y, schedule, sampler, rng)
    report = MetricReport()
    p_base = []
    for i, (r, b, x) in enumerate(zip(recon, base, images)):
        report.add(f"{name or spec.kind}_{i:03d}", np.clip(r, 0, 1), x)
        p_base.append(float(psnr(np.clip(b, 0, 1), x)))
    s = report.summary()
    return {"task": name or spec.kind, "psnr": s["psnr_mean"], "ssim": s["ssim_mean"],
            "baseline_psnr": float(np.mean(p_base)), "gain_db": s["psnr_mean"] - float(np.mean(p_base)),
            "report": report}
