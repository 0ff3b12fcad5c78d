"""KL- and entropy-constrained closed-form update of a linear-Gaussian policy.

For a quadratic Q-model, a Gaussian state distribution ``rho`` and the
current policy ``N(Ks + k, Sigma)``, the new policy is::

    N(F L s + F f, (eta + omega) F)
    F = (eta Sigma^-1 - Q_aa)^-1,  L = eta Sigma^-1 K + Q_as,  f = eta Sigma^-1 k + q_a

with ``(eta, omega)`` minimising the convex dual ``g``. Minimisation is
done on the profile ``eta -> g(eta, omega*(eta))``: for fixed ``eta`` the
optimal ``omega`` is closed form, and the profile derivative equals
``eps - E_rho KL(new || old)``, whose root is found by bracketed Brent
iterations in ``log eta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .gauss import (
    LOG_2PI,
    GaussianDist,
    LinGaussPolicy,
    NotPositiveDefiniteError,
    cholesky,
    expected_policy_kl,
    logdet_chol,
    spd_inverse,
    symmetrize,
)
from .qmodel import QuadraticModel, extract_update_blocks

MAX_DUAL_ITERATIONS = 10_000


class InfeasibleDualError(ValueError):
    pass


class DualOptimizationError(RuntimeError):
    def __init__(self, msg, last=None, grad_norm=None):
        super().__init__(msg)
        self.last = last
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class DualVars:
    eta: float
    omega: float


@dataclass(frozen=True)
class UpdateResult:
    new_policy: LinGaussPolicy
    eta_star: float
    omega_star: float
    achieved_kl: float
    achieved_entropy: float
    dual_value: float
    iterations: int
    eta_at_floor: bool = False


def entropy_target(policy_t: LinGaussPolicy, beta0: float) -> float:
    """Entropy lower bound for the next policy: current entropy minus ``beta0``."""
    return policy_t.entropy() - beta0


class _PolicyParts:
    """Quantities of the old policy reused across dual evaluations."""

    def __init__(self, policy: LinGaussPolicy):
        self.sigma_inv = spd_inverse(policy.cov, "policy covariance")
        self.logdet_sigma = logdet_chol(cholesky(policy.cov))


class _Terms:
    """F, L, f and friends at a given ``(eta, omega)``; F does not depend on ``omega``."""

    def __init__(self, eta, omega, blocks, policy: LinGaussPolicy, parts: _PolicyParts | None = None):
        Q_aa, Q_as, q_a = blocks
        parts = parts or _PolicyParts(policy)
        self.eta = float(eta)
        self.set_omega(omega)
        self.sigma_inv = parts.sigma_inv
        self.logdet_sigma = parts.logdet_sigma
        f_inv = symmetrize(self.eta * self.sigma_inv - Q_aa)
        try:
            chol = cholesky(f_inv, "eta Sigma^-1 - Q_aa")
        except NotPositiveDefiniteError as exc:
            raise InfeasibleDualError(
                f"eta={eta:.6g} is below the feasibility floor (F not positive definite)"
            ) from exc
        self.F = symmetrize(linalg.cho_solve((chol, True), np.eye(policy.d_a)))
        self.logdet_F = -logdet_chol(chol)
        self.L = self.eta * self.sigma_inv @ policy.gain + Q_as
        self.f = self.eta * self.sigma_inv @ policy.bias + q_a
        self.d_a = policy.d_a

    def set_omega(self, omega):
        self.omega = float(omega)
        self.lam = self.eta + self.omega
        return self

    def logdet_2pi_lam_F(self) -> float:
        return self.d_a * (LOG_2PI + np.log(self.lam)) + self.logdet_F


def dual_value(dv: DualVars, blocks, policy_t: LinGaussPolicy, rho_t: GaussianDist, eps: float,
               beta: float) -> float:
    """Closed-form dual ``g(eta, omega)`` (state-only Q terms are dropped)."""
    tm = _Terms(dv.eta, dv.omega, blocks, policy_t)
    K, k, Si = policy_t.gain, policy_t.bias, tm.sigma_inv
    M = 0.5 * (tm.L.T @ tm.F @ tm.L - tm.eta * K.T @ Si @ K)
    m = tm.L.T @ tm.F @ tm.f - tm.eta * K.T @ Si @ k
    m0 = 0.5 * (
        tm.f @ tm.F @ tm.f
        - tm.eta * k @ Si @ k
        - tm.eta * (policy_t.d_a * LOG_2PI + tm.logdet_sigma)
        + tm.lam * tm.logdet_2pi_lam_F()
    )
    mu, S = rho_t.mean, rho_t.cov
    ent = 0.0 if dv.omega == 0 else dv.omega * beta
    return float(tm.eta * eps - ent + mu @ M @ mu + np.trace(S @ M) + mu @ m + m0)


def dual_gradient(dv: DualVars, blocks, policy_t: LinGaussPolicy, rho_t: GaussianDist,
                  eps: float, beta: float) -> tuple[float, float]:
    """``(dg/deta, dg/domega)``.

    ``dg/deta = eps - E_rho KL(new || old)``, split into a state-independent
    part, a part linear in the state mean and a part quadratic in the state.
    """
    return _gradient(_Terms(dv.eta, dv.omega, blocks, policy_t), policy_t, rho_t, eps, beta)


def _gradient(tm: _Terms, policy_t, rho_t, eps, beta) -> tuple[float, float]:
    K, k, Si = policy_t.gain, policy_t.bias, tm.sigma_inv
    mu, S = rho_t.mean, rho_t.cov
    d_bias = tm.F @ tm.f - k
    d_gain = tm.F @ tm.L - K
    cst = eps - 0.5 * d_bias @ Si @ d_bias - 0.5 * (
        tm.logdet_sigma + policy_t.d_a * LOG_2PI
        - tm.logdet_2pi_lam_F()
        + tm.lam * np.trace(Si @ tm.F)
        - tm.d_a
    )
    lin = -(d_gain @ mu) @ Si @ d_bias
    G = d_gain.T @ Si @ d_gain
    quad = -0.5 * (mu @ G @ mu + np.trace(S @ G))
    d_omega = -beta + 0.5 * (tm.d_a + tm.logdet_2pi_lam_F())
    return float(cst + lin + quad), float(d_omega)


def eta_floor(Q_aa: np.ndarray, sigma: np.ndarray) -> float:
    """Smallest ``eta`` with ``eta Sigma^-1 - Q_aa >= delta I``, ``delta = 1e-8 tr(Sigma^-1)``."""
    sigma_inv = spd_inverse(sigma)
    delta = 1e-8 * np.trace(sigma_inv)
    vals = linalg.eigh(symmetrize(Q_aa) + delta * np.eye(len(sigma)), sigma_inv, eigvals_only=True)
    return float(vals[-1])


def optimal_omega(eta: float, blocks, policy_t: LinGaussPolicy, beta: float) -> float:
    """Minimiser of ``g(eta, .)`` over ``omega >= 0`` (closed form)."""
    if beta == -np.inf:
        return 0.0
    return _omega_from_terms(_Terms(eta, 0.0, blocks, policy_t), beta)


def _omega_from_terms(tm: _Terms, beta: float) -> float:
    if beta == -np.inf:
        return 0.0
    eta, d_a = tm.eta, tm.d_a
    log_lam = (2.0 * beta - d_a - d_a * LOG_2PI - tm.logdet_F) / d_a
    return max(0.0, float(np.exp(log_lam)) - eta)


def _lower_eta(blocks, policy_t) -> float:
    Q_aa = blocks[0]
    floor = eta_floor(Q_aa, policy_t.cov)
    if floor > 0:
        return 1.001 * floor
    # concave Q_aa: any eta > 0 is feasible, keep away from 0 relative to the problem scale
    sq = cholesky(policy_t.cov)
    scale = np.max(np.abs(np.linalg.eigvalsh(symmetrize(sq.T @ Q_aa @ sq))))
    return 1e-9 * max(scale, 1e-300)


def minimize_dual(blocks, policy_t: LinGaussPolicy, rho_t: GaussianDist, eps: float,
                  beta: float) -> tuple[DualVars, dict]:
    """Optimal ``(eta, omega)`` plus diagnostics ``{iterations, grad_norm, at_floor}``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    lo = _lower_eta(blocks, policy_t)
    parts = _PolicyParts(policy_t)

    def profile_grad(x):
        tm = _Terms(float(np.exp(x)), 0.0, blocks, policy_t, parts)
        tm.set_omega(_omega_from_terms(tm, beta))
        return _gradient(tm, policy_t, rho_t, eps, beta)[0]

    x_lo = np.log(lo)
    g_lo = profile_grad(x_lo)
    n_eval = 1
    if g_lo >= 0:
        # KL constraint slack even at the floor: the floor is the minimiser
        eta = lo
        omega = optimal_omega(eta, blocks, policy_t, beta)
        return DualVars(eta, omega), {"iterations": n_eval, "grad_norm": 0.0, "at_floor": True}

    step = 1.0
    x_hi = x_lo + step
    while profile_grad(x_hi) <= 0:
        n_eval += 1
        x_lo = x_hi
        step *= 2.0
        x_hi = x_lo + step
        if n_eval > MAX_DUAL_ITERATIONS or x_hi > 700:
            raise DualOptimizationError("could not bracket the dual minimum", last=np.exp(x_hi))
    try:
        x_star, res = optimize.brentq(profile_grad, x_lo, x_hi, xtol=1e-15,
                                      maxiter=MAX_DUAL_ITERATIONS, full_output=True)
    except RuntimeError as exc:
        raise DualOptimizationError(str(exc), last=np.exp(x_hi)) from exc
    eta = float(np.exp(x_star))
    omega = optimal_omega(eta, blocks, policy_t, beta)
    grad = dual_gradient(DualVars(eta, omega), blocks, policy_t, rho_t, eps, beta)
    grad_norm = abs(grad[0]) if omega == 0 else float(np.hypot(*grad))
    return DualVars(eta, omega), {
        "iterations": n_eval + res.function_calls,
        "grad_norm": grad_norm,
        "at_floor": False,
    }


def closed_form_update(policy_t: LinGaussPolicy, blocks, dv: DualVars) -> LinGaussPolicy:
    tm = _Terms(dv.eta, dv.omega, blocks, policy_t)
    cov = symmetrize(tm.lam * tm.F)
    try:
        cholesky(cov, "updated policy covariance")
    except NotPositiveDefiniteError as exc:
        raise InfeasibleDualError("updated covariance is not positive definite") from exc
    return LinGaussPolicy(tm.F @ tm.L, tm.F @ tm.f, cov)


def update_timestep(policy_t: LinGaussPolicy, q_model: QuadraticModel, rho_t: GaussianDist,
                    eps: float, beta0: float) -> UpdateResult:
    beta = entropy_target(policy_t, beta0)
    blocks = extract_update_blocks(q_model)
    if all(not np.any(b) for b in blocks):
        # nothing to improve and both constraints slack: keep the policy
        return UpdateResult(policy_t, np.inf, 0.0, 0.0, policy_t.entropy(), np.nan, 0, True)
    dv, info = minimize_dual(blocks, policy_t, rho_t, eps, beta)
    new = closed_form_update(policy_t, blocks, dv)
    return UpdateResult(
        new_policy=new,
        eta_star=dv.eta,
        omega_star=dv.omega,
        achieved_kl=expected_policy_kl(rho_t, new, policy_t),
        achieved_entropy=new.entropy(),
        dual_value=dual_value(dv, blocks, policy_t, rho_t, eps, beta),
        iterations=info["iterations"],
        eta_at_floor=info["at_floor"],
    )
