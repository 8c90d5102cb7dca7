import time

import numpy as np
import pytest
from _audit import REF_A, REF_PRIOR, REF_SIGMA_Y, REF_Y
from hypothesis import given, settings
from hypothesis import strategies as st

from diffunfold.numerics import Rng, finite_difference_gradient
from diffunfold.oracle import (DegenerateSystemError, DiscretePriorSpec, GaussianOracleDenoiser,
                               GaussianPriorSpec, NumericUnderflowError, composite_argmin_quadratic,
                               discrete_mmse, gaussian_conditional_score, gaussian_mmse, gaussian_posterior,
                               prior_given_noisy, random_gaussian_config, identity_sweep)


def test_reference_posterior():
    post = gaussian_posterior(REF_PRIOR, REF_A, REF_SIGMA_Y, REF_Y)
    assert post.mean[0] == pytest.approx(0.8, abs=1e-14)
    assert post.cov[0, 0] == pytest.approx(0.2, abs=1e-14)


def test_uninformative_measurement_returns_prior():
    prior = GaussianPriorSpec([0.5, -1.0], [[2.0, 0.3], [0.3, 1.0]])
    post = gaussian_posterior(prior, np.zeros((3, 2)), 0.1, np.ones(3))
    np.testing.assert_allclose(post.mean, prior.mean, atol=1e-14)
    np.testing.assert_allclose(post.cov, prior.cov, atol=1e-14)
    far = gaussian_posterior(prior, np.eye(2), 1e6, np.array([3.0, 3.0]))
    np.testing.assert_allclose(far.mean, prior.mean, atol=1e-8)
    np.testing.assert_allclose(far.cov, prior.cov, atol=1e-8)


def test_degenerate_cases_raise():
    with pytest.raises(DegenerateSystemError):
        gaussian_posterior(REF_PRIOR, REF_A, 0.0, REF_Y)
    with pytest.raises(ValueError):
        GaussianPriorSpec([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ValueError):
        GaussianPriorSpec(np.zeros(17), np.eye(17))
    with pytest.raises(ValueError):
        GaussianPriorSpec([0.0, 0.0], [[1.0, 0.1], [0.0, 1.0]])


def test_reference_score_and_mmse():
    args = (REF_PRIOR, REF_A, REF_SIGMA_Y, REF_Y)
    assert gaussian_conditional_score(*args, 1.0, [0.5])[0] == pytest.approx(0.25, abs=1e-14)
    assert gaussian_conditional_score(*args, 1.0, [0.8])[0] == pytest.approx(0.0, abs=1e-14)
    assert gaussian_mmse(*args, 1.0, [0.5])[0] == pytest.approx(0.75, abs=1e-14)
    assert composite_argmin_quadratic(*args, 1.0, [0.5])[0] == pytest.approx(0.75, abs=1e-10)
    with pytest.raises(ValueError):
        gaussian_conditional_score(*args, 0.0, [0.5])


def test_mmse_limits():
    args = (REF_PRIOR, REF_A, REF_SIGMA_Y, REF_Y)
    np.testing.assert_array_equal(gaussian_mmse(*args, 0.0, [0.37]), [0.37])
    assert gaussian_mmse(*args, 1e4, [3.0])[0] == pytest.approx(0.8, abs=1e-6)


def test_score_matches_fd_of_log_density():
    rng = Rng(21)
    for _ in range(10):
        prior, A, sy, y, st_, xt = random_gaussian_config(rng)
        post = gaussian_posterior(prior, A, sy, y)
        cov_t = post.cov + st_ ** 2 * np.eye(prior.dim)
        inv = np.linalg.inv(cov_t)

        def logpdf(v):
            d = v - post.mean
            return float(-0.5 * d @ inv @ d)

        fd = finite_difference_gradient(logpdf, xt.copy(), h=1e-5)
        s = gaussian_conditional_score(prior, A, sy, y, st_, xt)
        assert np.linalg.norm(s - fd) / np.linalg.norm(fd) < 1e-6


def test_identity_sweeps():
    start = time.perf_counter()
    out = identity_sweep(seed=0, n_configs=100)
    assert time.perf_counter() - start < 5
    assert out["max_score_residual"] < 1e-10
    assert out["max_argmin_residual"] < 1e-8


def test_identity_operator_argmin_is_precision_weighted_average():
    prior = GaussianPriorSpec([0.2, -0.4], [[1.0, 0.2], [0.2, 0.5]])
    y, xt = np.array([1.0, 0.5]), np.array([0.3, 0.1])
    m, C = prior_given_noisy(prior, 0.7, xt)
    C_inv = np.linalg.inv(C)
    ref = np.linalg.solve(np.eye(2) + C_inv, y + C_inv @ m)
    np.testing.assert_allclose(composite_argmin_quadratic(prior, np.eye(2), 1.0, y, 0.7, xt), ref, atol=1e-12)


def test_discrete_trivial_cases():
    single = DiscretePriorSpec([[0.3, -1.2]], [1.0])
    out = discrete_mmse(single, np.eye(2), 0.1, [5.0, 5.0], 0.2, [-3.0, 4.0])
    np.testing.assert_array_equal(out, [0.3, -1.2])
    sym = DiscretePriorSpec([[1.0, 2.0], [-1.0, -2.0]], [0.5, 0.5])
    np.testing.assert_allclose(discrete_mmse(sym, np.eye(2), 0.5, [0, 0], 1.0, [0, 0]), [0, 0], atol=1e-15)
    with pytest.raises(ValueError):
        DiscretePriorSpec([[0.0]], [0.7])
    with pytest.raises(ValueError):
        discrete_mmse(sym, np.eye(2), 0.0, [0, 0], 1.0, [0, 0])


def test_discrete_underflow_raises():
    prior = DiscretePriorSpec([[0.0]], [1.0])
    with pytest.raises(NumericUnderflowError):
        discrete_mmse(prior, [[1.0]], 1e-200, [1e200], 1e-200, [1e200])


def test_discrete_matches_monte_carlo():
    rng = Rng(22)
    atoms = rng.normal((5, 2))
    weights = np.array([0.1, 0.3, 0.2, 0.25, 0.15])
    prior = DiscretePriorSpec(atoms, weights)
    A = np.array([[1.0, 0.5]])
    sy, st_, y, xt = 0.8, 1.0, np.array([0.4]), np.array([0.2, -0.1])
    exact = discrete_mmse(prior, A, sy, y, st_, xt)

    draws = atoms[rng.choice(5, size=10 ** 6, p=weights)]
    logl = -0.5 * np.sum((draws @ A.T - y) ** 2, axis=1) / sy ** 2 - 0.5 * np.sum((draws - xt) ** 2, axis=1) / st_ ** 2
    w = np.exp(logl - logl.max())
    w /= w.sum()
    est = w @ draws
    # delta-method standard error of a self-normalised estimate
    se = np.sqrt(np.sum(w[:, None] ** 2 * (draws - est) ** 2, axis=0))
    assert np.all(np.abs(est - exact) < 3 * se + 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 7))
def test_discrete_permutation_invariance(seed, n_atoms):
    rng = Rng(seed)
    atoms = rng.normal((n_atoms, 3))
    weights = rng.uniform(0.1, 1.0, size=n_atoms)
    weights /= weights.sum()
    A, y, xt = rng.normal((2, 3)), rng.normal(2), rng.normal(3)
    base = discrete_mmse(DiscretePriorSpec(atoms, weights), A, 0.5, y, 0.7, xt)
    perm = rng.choice(n_atoms, size=n_atoms, replace=False)
    weights_p = weights[perm] / weights[perm].sum()
    permuted = discrete_mmse(DiscretePriorSpec(atoms[perm], weights_p), A, 0.5, y, 0.7, xt)
    np.testing.assert_allclose(permuted, base, atol=1e-12)


def test_oracle_denoiser_vectorised():
    den = GaussianOracleDenoiser(REF_PRIOR, REF_A, REF_SIGMA_Y, REF_Y)
    out = den.denoise(np.array([[0.5], [0.8]]), sigma_t=1.0)
    np.testing.assert_allclose(out[:, 0], [0.75, 0.8], atol=1e-14)
    assert den.calls == 1
