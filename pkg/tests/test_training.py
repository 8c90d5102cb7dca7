import math

import numpy as np
import pytest

from diffunfold.data import gen_synthetic
from diffunfold.denoiser import ConditionalDenoiser
from diffunfold.numerics import Rng, Var, no_grad, relative_error
from diffunfold.operators import DenseOperator
from diffunfold.oracle import GaussianPriorSpec
from diffunfold.schedules import NoiseSchedule
from diffunfold.training import (TaskPoolError, TaskSpec, TrainConfig, TrainingDivergence, UncertaintyHead,
                                 default_task_pool, fit, init_state, multitask_loss, noising, sample_task,
                                 swap_in_ema, train_step)


def test_noising_zero_sigma_is_exact():
    x = Rng(0).normal((3, 4))
    out = noising(x, 0.0, Rng(1))
    np.testing.assert_array_equal(out, x)


def test_noising_std_and_determinism():
    z = noising(np.zeros(10 ** 5), 2.0, Rng(2))
    assert abs(z.std() - 2.0) < 0.04
    np.testing.assert_array_equal(noising(np.zeros(5), 1.0, Rng(3)), noising(np.zeros(5), 1.0, Rng(3)))
    with pytest.raises(ValueError):
        noising(np.zeros(3), -1.0, Rng(0))


def test_noising_per_example_sigma():
    x = np.zeros((2, 1, 50, 50))
    out = noising(x, np.array([0.0, 3.0]), Rng(4))
    assert np.all(out[0] == 0)
    assert abs(out[1].std() - 3.0) < 0.15


def test_multitask_loss_examples():
    assert float(multitask_loss([(1.0, 0.5)], head=lambda t: Var(np.zeros(1))).value) == 1.0
    losses = np.array([0.5, 2.0, 3.5])
    plain = multitask_loss(losses, np.array([0.1, 0.2, 0.3]), head=lambda t: Var(np.zeros(3)))
    assert float(plain.value) == pytest.approx(losses.mean(), abs=1e-15)
    assert float(multitask_loss(losses).value) == pytest.approx(losses.mean(), abs=1e-15)
    with pytest.raises(ValueError):
        multitask_loss([])
    with pytest.raises(ValueError):
        multitask_loss(np.array([1.0, -0.1]))


def test_uncertainty_stationary_point():
    u, lr = 0.0, 0.5
    for _ in range(200):
        grad = -math.exp(-u) * math.e + 1.0
        u -= lr * grad
    assert abs(u - 1.0) < 1e-6


def test_uncertainty_clamp_keeps_loss_finite():
    head = UncertaintyHead(seed=0)
    head.head.b.value[...] = 1e3
    with no_grad():
        u = head(np.linspace(0, 1, 5)).value
    assert np.all(u == 10.0)
    out = multitask_loss(np.array([0.0, 1e6, 3.0, 0.0, 2.0]), np.linspace(0, 1, 5), head)
    assert np.isfinite(out.value)
    head.head.b.value[...] = -1e3
    out = multitask_loss(np.zeros(5), np.linspace(0, 1, 5), head)
    assert float(out.value) == -10.0


def test_head_starts_at_zero():
    with no_grad():
        np.testing.assert_array_equal(UncertaintyHead(seed=3)(np.linspace(0, 1, 7)).value, np.zeros(7))


def test_task_pool_validation_and_single_task():
    with pytest.raises(TaskPoolError):
        TaskSpec("denoise")
    with pytest.raises(TaskPoolError):
        sample_task(TrainConfig(tasks=[]), Rng(0))
    cfg = TrainConfig(tasks=[TaskSpec("superres", 1.0, {"factor": 2})], sigma_y_range=(0.01, 0.02))
    rng = Rng(5)
    for _ in range(50):
        op, sy = sample_task(cfg, rng, (1, 8, 8))
        assert op.kind == "superres"
        assert 0.01 <= sy <= 0.02
    with pytest.raises(ValueError):
        TrainConfig(sigma_y_range=(0.2, 0.1))


def test_task_pool_frequencies():
    cfg = TrainConfig(tasks=[TaskSpec("identity", 0.5), TaskSpec("superres", 0.5, {"factor": 2})])
    rng = Rng(6)
    n = 10 ** 4
    count = sum(sample_task(cfg, rng, (1, 4, 4))[0].kind == "identity" for _ in range(n))
    assert abs(count - n / 2) < 3 * math.sqrt(n / 4)


def test_default_pool_draws_fresh_masks():
    cfg = TrainConfig(tasks=default_task_pool())
    rng = Rng(7)
    masks = [op.mask for op, _ in (sample_task(cfg, rng, (1, 16, 16)) for _ in range(40)) if op.kind == "inpaint"]
    assert len(masks) >= 2
    assert any(not np.array_equal(masks[0], m) for m in masks[1:])


SMALL_POOL = [TaskSpec("deblur", 0.5, {"size": 3, "sigma_lo": 0.6, "sigma_hi": 1.2}),
              TaskSpec("inpaint", 0.5, {"drop_p": [0.2, 0.4]})]


def _small_setup(seed=0, shape=(1, 8, 8), lr=2e-4, tasks=None, channels=(4, 8, 8)):
    den = ConditionalDenoiser(K=4, channels=channels, seed=seed)
    data = Rng(seed + 100).uniform(size=(16,) + shape)
    cfg = TrainConfig(learning_rate=lr, batch_size=2, total_steps=10, seed=seed,
                      tasks=tasks or SMALL_POOL)
    return den, data, cfg, UncertaintyHead(seed=seed)


def test_zero_learning_rate_leaves_params_unchanged():
    den, data, cfg, head = _small_setup(lr=0.0)
    before = {k: p.value.copy() for k, p in den.named_parameters().items()}
    state = init_state(cfg, den, head)
    train_step(state, cfg, den, data, NoiseSchedule(), head)
    for k, p in den.named_parameters().items():
        np.testing.assert_array_equal(p.value, before[k])
    assert state.step == 1


def test_determinism_over_ten_steps():
    runs = []
    for _ in range(2):
        den, data, cfg, head = _small_setup(seed=4)
        _, losses = fit(cfg, den, data, NoiseSchedule(), head)
        runs.append(losses)
    assert len(runs[0]) == 10
    assert runs[0] == runs[1]


def test_train_step_gradient_audit():
    """Tape gradient of one full train_step objective vs central differences."""
    den, data, cfg, head = _small_setup(seed=8, lr=0.0)
    saved = Rng(123).get_state()
    params = den.parameters() + head.parameters()

    def objective():
        state = init_state(cfg, den, head)
        state.rng = Rng.from_state(saved)
        return train_step(state, cfg, den, data, NoiseSchedule(), head)

    objective()
    rng = Rng(9)
    tape, fd, h = [], [], 1e-6
    for p in params:
        flat = p.value.reshape(-1)
        g = p.grad.reshape(-1).copy()
        for i in np.atleast_1d(rng.choice(flat.size, size=min(3, flat.size), replace=False)):
            old = flat[i]
            flat[i] = old + h
            up = objective()
            flat[i] = old - h
            down = objective()
            flat[i] = old
            tape.append(g[i])
            fd.append((up - down) / (2 * h))
    assert relative_error(np.array(tape), np.array(fd)) < 1e-4


def test_loss_drops_on_gaussian_dense_problem():
    n = 16
    B = Rng(10).normal((n, n))
    prior = GaussianPriorSpec(np.full(n, 0.5), 0.05 * (B @ B.T / n + 0.5 * np.eye(n)))
    data = gen_synthetic("gauss1d", 256, 0, Rng(11), prior=prior).items.reshape(-1, 1, 4, 4)
    den = ConditionalDenoiser(K=4, channels=(8, 8, 8), seed=12)
    den.init_gamma([DenseOperator(Rng(0).normal((12, n)) / 4.0, (1, 4, 4))], target=0.5)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, total_steps=200, seed=13,
                      tasks=[TaskSpec("dense", 1.0, {"rows": 12, "seed": 0})])
    _, losses = fit(cfg, den, data, NoiseSchedule(), None)
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert np.mean(losses[-20:]) < losses[0]


def test_divergence_raises_with_snapshot():
    den, data, cfg, head = _small_setup(seed=14)
    den.reg.out.b.value[...] = np.nan
    with pytest.raises(TrainingDivergence) as info:
        train_step(init_state(cfg, den, head), cfg, den, data, NoiseSchedule(), head)
    assert info.value.snapshot["step"] == 0
    assert len(info.value.snapshot["operators"]) == cfg.batch_size


def test_ema_tracks_and_swaps():
    den, data, cfg, head = _small_setup(seed=15, lr=1e-2)
    cfg.ema_decay = 0.5
    state, _ = fit(cfg, den, data, NoiseSchedule(), head)
    name = den.reg.out.w.name
    current = den.named_parameters()[name].value.copy()
    old = swap_in_ema(den, state.ema)
    np.testing.assert_array_equal(den.named_parameters()[name].value, state.ema[name])
    np.testing.assert_array_equal(old[name], current)
    assert not np.array_equal(state.ema[name], current)
