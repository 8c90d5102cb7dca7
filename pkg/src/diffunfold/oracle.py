"""Closed-form posteriors for checking the denoiser/score identities.

With a Gaussian prior N(mu, Sigma), measurements y = A x + sigma_y n and
noising x_t = x + sigma_t n', everything is Gaussian:

    p(x | y)      = N(mu_post, Sigma_post)
    p(x_t | y)    = N(mu_post, Sigma_post + sigma_t^2 I)
    E[x | x_t, y] = (Sigma_post^-1 + I/sigma_t^2)^-1 (Sigma_post^-1 mu_post + x_t/sigma_t^2)

Discrete priors are handled by exhaustive (log-sum-exp) summation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng


class DegenerateSystemError(np.linalg.LinAlgError):
    """The combined precision or normal equations are singular."""


class NumericUnderflowError(FloatingPointError):
    """All posterior weights vanished."""


def _as_matrix(A, n: int) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 0:
        A = A * np.eye(n) if n == 1 else A * np.eye(n)
    if A.ndim == 1:
        A = A.reshape(1, -1) if A.size == n else A.reshape(-1, 1)
    if A.shape[1] != n:
        raise ValueError(f"A has {A.shape[1]} columns, prior has dimension {n}")
    return A


def _solve(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        if np.linalg.cond(M) > 1e14:
            raise DegenerateSystemError("ill-conditioned system")
        return np.linalg.solve(M, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateSystemError(str(exc)) from exc


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


@dataclass
class GaussianPriorSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        n = self.mean.size
        if self.cov.shape != (n, n):
            raise ValueError(f"cov shape {self.cov.shape} does not match mean of size {n}")
        if n > 16:
            raise ValueError("oracle priors are capped at dimension 16")
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-12:
            raise ValueError("cov must be symmetric")
        if np.min(np.linalg.eigvalsh(self.cov)) <= 0:
            raise ValueError("cov must be positive definite")

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        L = np.linalg.cholesky(self.cov)
        return self.mean + rng.normal((n, self.dim)) @ L.T


@dataclass
class DiscretePriorSpec:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim == 1:
            self.atoms = self.atoms[:, None]
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.atoms.shape[0] == 0:
            raise ValueError("a discrete prior needs at least one atom")
        if self.weights.shape != (self.atoms.shape[0],) or np.any(self.weights <= 0):
            raise ValueError("weights must be positive, one per atom")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")


@dataclass
class AnalyticPosterior:
    mean: np.ndarray
    cov: np.ndarray
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.min(np.linalg.eigvalsh(_sym(self.cov))) <= 0:
            raise DegenerateSystemError("posterior covariance is not positive definite")


def gaussian_posterior(prior: GaussianPriorSpec, A, sigma_y: float, y) -> AnalyticPosterior:
    """p(x | y) for y = A x + sigma_y n."""
    n = prior.dim
    A = _as_matrix(A, n)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    prior_prec = np.linalg.inv(prior.cov)
    if sigma_y > 0:
        prec = prior_prec + A.T @ A / sigma_y ** 2
        rhs = prior_prec @ prior.mean + A.T @ y / sigma_y ** 2
    elif sigma_y == 0:
        # Noise-free limit: the measurement pins A x = y exactly.
        raise DegenerateSystemError("sigma_y = 0 gives a singular posterior covariance")
    else:
        raise ValueError("sigma_y must be non-negative")
    cov = _sym(np.linalg.inv(prec)) if np.linalg.cond(prec) < 1e14 else None
    if cov is None:
        raise DegenerateSystemError("combined precision is singular")
    mean = _solve(prec, rhs)
    return AnalyticPosterior(mean, cov, {"A": A, "sigma_y": sigma_y, "y": y})


def gaussian_conditional_score(prior, A, sigma_y, y, sigma_t: float, x_t) -> np.ndarray:
    """grad_{x_t} log p(x_t | y) = -(Sigma_post + sigma_t^2 I)^-1 (x_t - mu_post)."""
    if sigma_t <= 0:
        raise ValueError("the conditional score needs sigma_t > 0")
    post = gaussian_posterior(prior, A, sigma_y, y)
    x_t = np.atleast_1d(np.asarray(x_t, dtype=np.float64))
    cov_t = post.cov + sigma_t ** 2 * np.eye(prior.dim)
    return -_solve(cov_t, x_t - post.mean)


def gaussian_mmse(prior, A, sigma_y, y, sigma_t: float, x_t) -> np.ndarray:
    """E[x | x_t, y]; equals x_t at sigma_t = 0."""
    x_t = np.atleast_1d(np.asarray(x_t, dtype=np.float64))
    if sigma_t == 0:
        return x_t.copy()
    post = gaussian_posterior(prior, A, sigma_y, y)
    post_prec = np.linalg.inv(post.cov)
    M = post_prec + np.eye(prior.dim) / sigma_t ** 2
    return _solve(M, post_prec @ post.mean + x_t / sigma_t ** 2)


def prior_given_noisy(prior: GaussianPriorSpec, sigma_t: float, x_t):
    """(m_t, C_t): Gaussian parameters of p(x | x_t) under x_t = x + sigma_t n."""
    x_t = np.atleast_1d(np.asarray(x_t, dtype=np.float64))
    prior_prec = np.linalg.inv(prior.cov)
    prec = prior_prec + np.eye(prior.dim) / sigma_t ** 2
    C = _sym(np.linalg.inv(prec))
    m = _solve(prec, prior_prec @ prior.mean + x_t / sigma_t ** 2)
    return m, C


def composite_argmin_quadratic(prior, A, sigma_y, y, sigma_t: float, x_t) -> np.ndarray:
    """argmin_x 0.5 ||A x - y||^2 + h_t(x) with the quadratic conditional
    regulariser h_t(x) = (sigma_y^2 / 2) (x - m_t)^T C_t^-1 (x - m_t),
    solved through its normal equations."""
    n = prior.dim
    A = _as_matrix(A, n)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    m, C = prior_given_noisy(prior, sigma_t, x_t)
    C_inv = np.linalg.inv(C)
    H = A.T @ A + sigma_y ** 2 * C_inv
    return _solve(H, A.T @ y + sigma_y ** 2 * C_inv @ m)


def discrete_mmse(prior: DiscretePriorSpec, A, sigma_y: float, y, sigma_t: float, x_t) -> np.ndarray:
    """E[x | x_t, y] for a finite mixture of point masses, by exhaustive sum."""
    if sigma_y <= 0 or sigma_t <= 0:
        raise ValueError("discrete_mmse needs sigma_y > 0 and sigma_t > 0")
    atoms = prior.atoms
    A = _as_matrix(A, atoms.shape[1])
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    x_t = np.atleast_1d(np.asarray(x_t, dtype=np.float64))
    with np.errstate(over="ignore", invalid="ignore"):
        logw = (np.log(prior.weights)
                - 0.5 * np.sum((atoms @ A.T - y) ** 2, axis=1) / sigma_y ** 2
                - 0.5 * np.sum((atoms - x_t) ** 2, axis=1) / sigma_t ** 2)
    top = np.max(logw)
    if not np.isfinite(top):
        raise NumericUnderflowError("all posterior weights underflowed")
    w = np.exp(logw - top)
    total = w.sum()
    if total == 0 or not np.isfinite(total):
        raise NumericUnderflowError("posterior normaliser vanished")
    return (w / total) @ atoms


class GaussianOracleDenoiser:
    """Exact E[x | x_t, y] for a Gaussian prior, vectorised over a leading
    batch axis; drop-in for a learned denoiser inside the samplers."""

    def __init__(self, prior: GaussianPriorSpec, A, sigma_y: float, y):
        self.prior = prior
        self.post = gaussian_posterior(prior, A, sigma_y, y)
        self._post_prec = np.linalg.inv(self.post.cov)
        self.calls = 0

    def denoise(self, x_t, meas=None, op=None, sigma_t=0.0, t=None) -> np.ndarray:
        self.calls += 1
        x_t = np.asarray(x_t, dtype=np.float64)
        if sigma_t == 0:
            return x_t.copy()
        n = self.prior.dim
        M = self._post_prec + np.eye(n) / sigma_t ** 2
        flat = x_t.reshape(-1, n)
        rhs = (self._post_prec @ self.post.mean)[None, :] + flat / sigma_t ** 2
        return np.linalg.solve(M, rhs.T).T.reshape(x_t.shape)

    __call__ = denoise


def composite_regularizer(prior: GaussianPriorSpec, sigma_y: float, sigma_t: float, x_t):
    """A regulariser R with tau = 1 such that the unfolding iteration performs
    gradient descent on 0.5||Ax - y||^2 + h_t(x) for the Gaussian prior."""
    m, C = prior_given_noisy(prior, sigma_t, x_t)
    P = sigma_y ** 2 * np.linalg.inv(C)

    def reg(x, sigma=None):
        from .numerics import ops
        return ops.sub(x, ops.matmul(ops.sub(x, m), P.T))

    return reg


def random_gaussian_config(rng: Rng, n_max: int = 8, sigma_t_range=(0.05, 5.0), sigma_y_range=(0.05, 1.0)):
    """One random (prior, A, sigma_y, y, sigma_t, x_t) draw for identity sweeps."""
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, n_max + 1))
    B = rng.normal((n, n))
    cov = B @ B.T / n + 0.2 * np.eye(n)
    cov = _sym(cov)
    prior = GaussianPriorSpec(rng.normal(n), cov)
    A = rng.normal((m, n)) / np.sqrt(n)
    sigma_y = float(rng.uniform(*sigma_y_range))
    sigma_t = float(rng.uniform(*sigma_t_range))
    x = prior.sample(rng, 1)[0]
    y = A @ x + sigma_y * rng.normal(m)
    x_t = x + sigma_t * rng.normal(n)
    return prior, A, sigma_y, y, sigma_t, x_t


def identity_sweep(seed: int = 0, n_configs: int = 100) -> dict:
    """Max residuals of the two denoiser identities over random configs:
    mmse vs x_t + sigma_t^2 score, and composite argmin vs mmse."""
    rng = Rng(seed)
    score_res, argmin_res = 0.0, 0.0
    for _ in range(n_configs):
        prior, A, sy, y, st, xt = random_gaussian_config(rng)
        d = gaussian_mmse(prior, A, sy, y, st, xt)
        s = gaussian_conditional_score(prior, A, sy, y, st, xt)
        score_res = max(score_res, float(np.max(np.abs(d - (xt + st ** 2 * s)))))
        c = composite_argmin_quadratic(prior, A, sy, y, st, xt)
        argmin_res = max(argmin_res, float(np.max(np.abs(c - d))))
    return {"n_configs": n_configs, "seed": seed, "max_score_residual": score_res,
            "max_argmin_residual": argmin_res}
