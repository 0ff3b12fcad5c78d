"""Gaussian and linear-Gaussian calculus.

Everything here works on full symmetric covariance matrices. Positive
definiteness is always checked through a Cholesky factorisation so that a
degenerate covariance raises instead of leaking NaNs downstream.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

LOG_2PI = np.log(2.0 * np.pi)


class NotPositiveDefiniteError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def cholesky(a: np.ndarray, what: str = "covariance") -> np.ndarray:
    """Lower Cholesky factor of ``a`` or :class:`NotPositiveDefiniteError`."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefiniteError(f"{what} has non-finite entries")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"{what} is not positive definite") from exc


def logdet_chol(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def spd_inverse(a: np.ndarray, what: str = "covariance") -> np.ndarray:
    chol = cholesky(a, what)
    inv = linalg.cho_solve((chol, True), np.eye(a.shape[0]))
    return symmetrize(inv)


@dataclass(frozen=True)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean dim {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def chol(self) -> np.ndarray:
        return cholesky(self.cov)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        """Log density at the rows of ``x`` (shape ``(n, d)`` or ``(d,)``)."""
        x = np.asarray(x, dtype=float)
        chol = self.chol
        diff = np.atleast_2d(x) - self.mean
        white = linalg.solve_triangular(chol, diff.T, lower=True)
        out = -0.5 * (np.sum(white**2, axis=0) + self.dim * LOG_2PI + logdet_chol(chol))
        return out if x.ndim > 1 else out[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T


@dataclass(frozen=True)
class LinGaussPolicy:
    """Conditional Gaussian ``N(a | gain @ s + bias, cov)``."""

    gain: np.ndarray
    bias: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        gain = np.atleast_2d(np.asarray(self.gain, dtype=float))
        bias = np.atleast_1d(np.asarray(self.bias, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d_a = bias.size
        if gain.shape[0] != d_a or cov.shape != (d_a, d_a):
            raise ValueError(
                f"inconsistent policy shapes: gain {gain.shape}, bias {bias.shape}, cov {cov.shape}"
            )
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "cov", cov)

    @property
    def d_a(self) -> int:
        return self.bias.size

    @property
    def d_s(self) -> int:
        return self.gain.shape[1]

    def mean(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return s @ self.gain.T + self.bias

    def entropy(self) -> float:
        return entropy_gaussian(GaussianDist(self.bias, self.cov))

    def logpdf(self, a: np.ndarray, s: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        chol = cholesky(self.cov, "policy covariance")
        diff = np.atleast_2d(a) - np.atleast_2d(self.mean(s))
        white = linalg.solve_triangular(chol, diff.T, lower=True)
        out = -0.5 * (np.sum(white**2, axis=0) + self.d_a * LOG_2PI + logdet_chol(chol))
        return out if a.ndim > 1 else out[0]


def _check_same_dim(p: GaussianDist, q: GaussianDist):
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")


def kl_gaussian(p: GaussianDist, q: GaussianDist) -> float:
    """KL(p || q) in nats."""
    _check_same_dim(p, q)
    chol_p = cholesky(p.cov, "covariance of p")
    chol_q = cholesky(q.cov, "covariance of q")
    a = linalg.solve_triangular(chol_q, chol_p, lower=True)
    diff = linalg.solve_triangular(chol_q, p.mean - q.mean, lower=True)
    kl = 0.5 * (np.sum(a**2) + diff @ diff - p.dim + logdet_chol(chol_q) - logdet_chol(chol_p))
    return max(float(kl), 0.0)


def entropy_gaussian(p: GaussianDist) -> float:
    chol = cholesky(p.cov)
    return 0.5 * (p.dim * (1.0 + LOG_2PI) + logdet_chol(chol))


def policy_gain_metric(p_new: LinGaussPolicy, p_old: LinGaussPolicy) -> np.ndarray:
    """``(K - K')^T Sigma_old^{-1} (K - K')``, the state-quadratic part of the policy KL."""
    dk = p_new.gain - p_old.gain
    chol = cholesky(p_old.cov, "old policy covariance")
    w = linalg.solve_triangular(chol, dk, lower=True)
    return symmetrize(w.T @ w)


def expected_policy_kl(rho: GaussianDist, p_new: LinGaussPolicy, p_old: LinGaussPolicy) -> float:
    """Closed form of ``E_{s~rho} KL(p_new(.|s) || p_old(.|s))``."""
    if p_new.d_s != rho.dim or p_old.d_s != rho.dim or p_new.d_a != p_old.d_a:
        raise ValueError("dimension mismatch between state distribution and policies")
    chol_new = cholesky(p_new.cov, "new policy covariance")
    chol_old = cholesky(p_old.cov, "old policy covariance")
    cov_part = linalg.solve_triangular(chol_old, chol_new, lower=True)
    # mean difference is D s + e, averaged under rho
    w_d = linalg.solve_triangular(chol_old, p_new.gain - p_old.gain, lower=True)
    w_e = linalg.solve_triangular(chol_old, p_new.bias - p_old.bias, lower=True)
    w_mu = w_d @ rho.mean + w_e
    mean_part = w_mu @ w_mu + np.sum((w_d @ cholesky(rho.cov, "state covariance")) ** 2)
    kl = 0.5 * (
        np.sum(cov_part**2) + mean_part - p_new.d_a + logdet_chol(chol_old) - logdet_chol(chol_new)
    )
    return max(float(kl), 0.0)


def joint_state_action(rho: GaussianDist, policy: LinGaussPolicy) -> GaussianDist:
    """Joint Gaussian of ``(s, a)`` when ``s ~ rho`` and ``a ~ policy(.|s)``."""
    k = policy.gain
    mean = np.concatenate([rho.mean, policy.mean(rho.mean)])
    cross = k @ rho.cov
    cov = np.block([[rho.cov, cross.T], [cross, k @ rho.cov @ k.T + policy.cov]])
    return GaussianDist(mean, symmetrize(cov))


def weighted_mle_gaussian(samples: np.ndarray, weights: np.ndarray | None = None) -> GaussianDist:
    """Weighted maximum-likelihood Gaussian with deterministic jitter on degeneracy."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = x.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite, nonnegative and one per sample")
    if np.count_nonzero(w) < d + 1:
        raise DegenerateFitError(
            f"need at least {d + 1} samples with nonzero weight, got {np.count_nonzero(w)}"
        )
    w = w / w.sum()
    mean = w @ x
    diff = x - mean
    cov = symmetrize((diff * w[:, None]).T @ diff)
    scale = np.trace(cov) / d
    if not scale > 0:
        raise DegenerateFitError("all samples coincide")
    jitter = 0.0
    for factor in [0.0] + [10.0**e for e in range(-9, -2)]:
        jitter = factor * scale
        try:
            cholesky(cov + jitter * np.eye(d))
            break
        except NotPositiveDefiniteError:
            continue
    else:
        raise DegenerateFitError("covariance not positive definite even with maximal jitter")
    return GaussianDist(mean, cov + jitter * np.eye(d))
