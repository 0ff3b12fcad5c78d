"""Numerical audits of the policy-improvement theory on linear-Gaussian systems.

Checks provided:

* :func:`check_perf_diff`: performance-difference identity
  ``J(p) - J(q) = sum_t E_{p}[A_t^q]``, both sides by Monte Carlo.
* :func:`check_advantage_bound`: lower bound on ``J(p) - J(q)`` from
  advantages under the *old* state distribution and Pinsker's inequality.
* :func:`check_state_kl_recursion`: ``KL(p_{t+1}||q_{t+1}) <= KL(p_t||q_t)
  + E_{p_t} KL(p_t(.|s)||q_t(.|s))``.
* :func:`check_appendix_b`: the three Gaussian inequalities that turn a
  KL bound under ``q_t`` into one under ``p_t``.

Every check returns a :class:`BoundCheckReport`; ``passed`` is
``slack >= -tolerance`` for closed-form checks and
``|lhs - rhs| <= 3 stderr`` for the Monte-Carlo identity.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm, qmc

from . import lqr
from .env import LinearEnv, LinearEnvParams
from .gauss import (
    GaussianDist,
    LinGaussPolicy,
    cholesky,
    expected_policy_kl,
    joint_state_action,
    kl_gaussian,
    spd_inverse,
    symmetrize,
)
from .rollout import _simulate

CLOSED_FORM_TOL = 1e-10
MC_SIGMAS = 3.0


@dataclass(frozen=True)
class BoundCheckReport:
    name: str
    description: str
    lhs: float
    rhs: float
    slack: float
    passed: bool
    mc_stderr: float = float("nan")
    tolerance: float = CLOSED_FORM_TOL
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        se = "" if math.isnan(self.mc_stderr) else f" stderr={self.mc_stderr:.3g}"
        return (f"[{status}] {self.name}: {self.description} lhs={self.lhs:.6g} "
                f"rhs={self.rhs:.6g} slack={self.slack:.3g}{se}")


def _closed_form(name, description, lhs, rhs, tol=CLOSED_FORM_TOL, note="") -> BoundCheckReport:
    """Report for ``lhs <= rhs``."""
    slack = float(rhs - lhs)
    return BoundCheckReport(name, description, float(lhs), float(rhs), slack, slack >= -tol,
                            tolerance=tol, note=note)


# ------------------------------------------------------------------ random instances


def random_spd(rng: np.random.Generator, d: int, lo: float = 0.2, hi: float = 2.0) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return symmetrize((q * rng.uniform(lo, hi, d)) @ q.T)


def random_gaussian(rng, d: int, mean_scale: float = 1.0) -> GaussianDist:
    return GaussianDist(mean_scale * rng.standard_normal(d), random_spd(rng, d))


def random_lin_policy(rng, d_s: int, d_a: int, scale: float = 0.5) -> LinGaussPolicy:
    return LinGaussPolicy(scale * rng.standard_normal((d_a, d_s)), scale * rng.standard_normal(d_a),
                          random_spd(rng, d_a, 0.1, 1.0))


def random_linear_env(rng, d_s: int = 2, d_a: int = 1, T: int = 10, noise: float = 0.05) -> LinearEnv:
    """Mildly stable random system with a concave quadratic reward."""
    A = rng.standard_normal((d_s, d_s))
    A *= 0.95 / max(1.0, np.max(np.abs(np.linalg.eigvals(A))))
    params = LinearEnvParams(
        A=A,
        B=rng.standard_normal((d_s, d_a)),
        noise_cov=noise * np.eye(d_s),
        R_ss=-random_spd(rng, d_s),
        R_aa=-random_spd(rng, d_a, 0.1, 0.5),
        r_s=0.1 * rng.standard_normal(d_s),
        initial_state_dist=GaussianDist(rng.standard_normal(d_s), random_spd(rng, d_s, 0.05, 0.5)),
        horizon=T,
    )
    return LinearEnv(params)


def perturb_policy(rng, policy: list[LinGaussPolicy], scale: float = 0.2) -> list[LinGaussPolicy]:
    out = []
    for p in policy:
        c = cholesky(p.cov)
        e = np.eye(p.d_a) + scale * np.tril(rng.standard_normal((p.d_a, p.d_a)))
        out.append(LinGaussPolicy(p.gain + scale * rng.standard_normal(p.gain.shape),
                                  p.bias + scale * rng.standard_normal(p.d_a),
                                  symmetrize((c @ e) @ (c @ e).T)))
    return out


def _bisect(feasible, lo: float = 0.0, hi: float = 1.0, iters: int = 60) -> float:
    """Largest ``alpha`` in ``[lo, hi]`` found by bisection with ``feasible(alpha)`` true."""
    if feasible(hi):
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _gauss_path(q: GaussianDist, dmean, dchol):
    c = cholesky(q.cov)

    def at(alpha):
        lc = c @ (np.eye(q.dim) + alpha * dchol)
        return GaussianDist(q.mean + alpha * dmean, symmetrize(lc @ lc.T))

    return at


def _policy_path(q: LinGaussPolicy, dgain, dbias, dchol):
    c = cholesky(q.cov)

    def at(alpha):
        lc = c @ (np.eye(q.d_a) + alpha * dchol)
        return LinGaussPolicy(q.gain + alpha * dgain, q.bias + alpha * dbias, symmetrize(lc @ lc.T))

    return at


@dataclass(frozen=True)
class AppendixBInstance:
    p_t: GaussianDist
    q_t: GaussianDist
    p_pol: LinGaussPolicy
    q_pol: LinGaussPolicy
    eps: float
    eps_t: float


def random_appendix_b_instance(rng, d_s: int, d_a: int | None = None) -> AppendixBInstance:
    """Instance meeting ``KL(p_t||q_t) <= eps_t`` and ``E_q KL(p_pol||q_pol) <= eps``.

    Random perturbation directions are scaled by bisection until each KL
    sits at (or just under) its budget, so preconditions hold exactly and
    are usually nearly active.
    """
    d_a = d_a or int(rng.integers(1, 4))
    eps = float(10 ** rng.uniform(-3, 0))
    eps_t = float(10 ** rng.uniform(-3, 0.5))
    q_t = random_gaussian(rng, d_s)
    q_pol = random_lin_policy(rng, d_s, d_a)
    # strictly lower triangular and diagonal in (-1, 1) keeps the factor nonsingular on [0, 1]
    dc = np.tril(rng.uniform(-0.9, 0.9, (d_s, d_s)))
    state_at = _gauss_path(q_t, 3.0 * rng.standard_normal(d_s), dc)
    alpha = _bisect(lambda x: kl_gaussian(state_at(x), q_t) <= eps_t)
    dca = np.tril(rng.uniform(-0.9, 0.9, (d_a, d_a)))
    pol_at = _policy_path(q_pol, 3.0 * rng.standard_normal((d_a, d_s)), 3.0 * rng.standard_normal(d_a), dca)
    beta = _bisect(lambda x: expected_policy_kl(q_t, pol_at(x), q_pol) <= eps)
    return AppendixBInstance(state_at(alpha), q_t, pol_at(beta), q_pol, eps, eps_t)


# ------------------------------------------------------------------ Gaussian inequalities


def _bias_shift(dgain: np.ndarray, dbias: np.ndarray, sigma_inv: np.ndarray) -> np.ndarray:
    """``c`` minimising ``(D c - e)' S^-1 (D c - e)``: the state offset that absorbs the bias change."""
    w = cholesky(sigma_inv)
    c, *_ = np.linalg.lstsq(w.T @ dgain, w.T @ dbias, rcond=None)
    return c


def check_appendix_b(p_t: GaussianDist, q_t: GaussianDist, p_pol: LinGaussPolicy,
                     q_pol: LinGaussPolicy, eps: float, eps_t: float,
                     tol: float = CLOSED_FORM_TOL) -> list[BoundCheckReport]:
    """Preconditions then inequalities (i)-(iii); one report per line of the audit.

    ``M = (K_p - K_q)' Sigma_q^-1 (K_p - K_q)`` uses the inverse covariance
    of the old policy, and the state mean in (ii) is shifted by the offset
    that absorbs the bias difference; without that shift (ii) fails for
    policies whose biases differ.
    """
    d_s = p_t.dim
    kl_state = kl_gaussian(p_t, q_t)
    kl_pol_q = expected_policy_kl(q_t, p_pol, q_pol)
    pre = [
        _closed_form("appendix_b.pre_state_kl", "KL(p_t||q_t) <= eps_t", kl_state, eps_t, tol),
        _closed_form("appendix_b.pre_policy_kl", "E_q KL(p||q) <= eps", kl_pol_q, eps, tol),
    ]
    if not all(r.passed for r in pre):
        return pre
    tr = float(np.trace(spd_inverse(q_t.cov) @ p_t.cov))
    sig_inv = spd_inverse(q_pol.cov)
    dgain = p_pol.gain - q_pol.gain
    M = dgain.T @ sig_inv @ dgain
    mu = p_t.mean + _bias_shift(dgain, p_pol.bias - q_pol.bias, sig_inv)
    kl_pol_p = expected_policy_kl(p_t, p_pol, q_pol)
    return pre + [
        _closed_form("appendix_b.i", "tr(S_q^-1 S_p) <= 4 eps_t + 2 d_s", tr, 4 * eps_t + 2 * d_s, tol),
        _closed_form("appendix_b.ii", "mu_p' M mu_p <= 2 eps (1 + 2 eps_t)", float(mu @ M @ mu),
                     2 * eps * (1 + 2 * eps_t), tol, note="bias-shifted state mean"),
        _closed_form("appendix_b.iii", "E_p KL(p||q) <= 2 eps (3 eps_t + d_s + 1)", kl_pol_p,
                     2 * eps * (3 * eps_t + d_s + 1), tol),
    ]


def appendix_b_suite(rng, n_instances: int = 1000, dims=(1, 2, 5),
                     tol: float = CLOSED_FORM_TOL) -> list[BoundCheckReport]:
    """``n_instances`` random instances per state dimension, worst slack per inequality."""
    out = []
    for d_s in dims:
        worst: dict[str, BoundCheckReport] = {}
        fails: dict[str, int] = {}
        for _ in range(n_instances):
            inst = random_appendix_b_instance(rng, d_s)
            for r in check_appendix_b(inst.p_t, inst.q_t, inst.p_pol, inst.q_pol, inst.eps,
                                      inst.eps_t, tol):
                fails[r.name] = fails.get(r.name, 0) + (not r.passed)
                if r.name not in worst or r.slack < worst[r.name].slack:
                    worst[r.name] = r
        for name, r in worst.items():
            out.append(BoundCheckReport(
                f"{name}[d_s={d_s}]", r.description, r.lhs, r.rhs, r.slack, fails[name] == 0,
                tolerance=tol,
                note=f"worst of {n_instances} instances; {fails[name]} violations",
            ))
    return out


def near_tight_isotropic(eps_t: float, d_s: int = 1) -> AppendixBInstance:
    """Isotropic scaling with ``KL(p_t||q_t) = eps_t`` exactly: ``lambda - 1 - log lambda = 2 eps_t / d_s``."""
    from scipy.optimize import brentq

    target = 2.0 * eps_t / d_s
    lam = brentq(lambda x: x - 1 - np.log(x) - target, 1.0, 10.0 + 2 * target)
    q_t = GaussianDist(np.zeros(d_s), np.eye(d_s))
    p_t = GaussianDist(np.zeros(d_s), lam * np.eye(d_s))
    pol = LinGaussPolicy(np.zeros((1, d_s)), np.zeros(1), np.eye(1))
    return AppendixBInstance(p_t, q_t, pol, pol, 1e-3, eps_t)


# ------------------------------------------------------------------ linear-system checks


def _state_marginals(env: LinearEnv, policy):
    return lqr.propagate(env, policy)


def check_state_kl_recursion(env: LinearEnv, p: list[LinGaussPolicy], q: list[LinGaussPolicy],
                             tol: float = CLOSED_FORM_TOL) -> list[BoundCheckReport]:
    """Per-step ``KL(p_{t+1}||q_{t+1}) <= KL(p_t||q_t) + E_{p_t} KL(p_t(.|s)||q_t(.|s))``."""
    rp, rq = _state_marginals(env, p), _state_marginals(env, q)
    out = []
    for t in range(env.spec.T):
        lhs = kl_gaussian(rp[t + 1], rq[t + 1])
        rhs = kl_gaussian(rp[t], rq[t]) + expected_policy_kl(rp[t], p[t], q[t])
        out.append(_closed_form(f"state_kl_recursion[t={t + 1}]",
                                "KL(p_t+1||q_t+1) <= KL(p_t||q_t) + E KL(pi_p||pi_q)", lhs, rhs, tol))
    return out


def _sample_returns(env: LinearEnv, policy, n: int, rng: np.random.Generator):
    T, d_s, d_a = env.spec.T, env.spec.d_s, env.spec.d_a
    xi0 = rng.standard_normal((n, d_s))
    xa = rng.standard_normal((n, T, d_a))
    xs = rng.standard_normal((n, T, d_s))
    return _simulate(env, policy, env.initial_state_dist(), xi0, xa, xs)


def check_perf_diff(env: LinearEnv, p: list[LinGaussPolicy], q: list[LinGaussPolicy], n: int,
                    rng: np.random.Generator) -> BoundCheckReport:
    """Monte-Carlo check of ``J(p) - J(q) = sum_t E_{s,a ~ p}[A_t^q(s, a)]``.

    ``lhs`` uses returns of ``n`` rollouts of each policy; ``rhs`` sums exact
    advantages of ``q`` along ``n`` rollouts of ``p``. The stderr is that of
    ``lhs - rhs`` (the two share the ``p`` rollouts).
    """
    qs, _ = lqr.evaluate_policy(env, q)
    adv = [lqr.advantage(qt, qp) for qt, qp in zip(qs, q)]
    states, actions, rewards = _sample_returns(env, p, n, rng)
    _, _, rewards_q = _sample_returns(env, q, n, rng)
    ret_p = rewards.sum(axis=1)
    ret_q = rewards_q.sum(axis=1)
    adv_sum = sum(adv[t](states[:, t], actions[:, t]) for t in range(env.spec.T))
    lhs = ret_p.mean() - ret_q.mean()
    rhs = adv_sum.mean()
    diff_se = math.sqrt(np.var(ret_p - adv_sum, ddof=1) / n + np.var(ret_q, ddof=1) / n)
    gap = abs(lhs - rhs)
    exact = lqr.policy_return(env, p) - lqr.policy_return(env, q)
    return BoundCheckReport(
        "perf_diff", "J(p) - J(q) = sum_t E_p[A_t^q]", float(lhs), float(rhs),
        float(MC_SIGMAS * diff_se - gap), bool(gap <= MC_SIGMAS * diff_se) or gap == 0.0,
        mc_stderr=float(diff_se), tolerance=MC_SIGMAS,
        note=f"exact J(p) - J(q) = {exact:.10g}; n = {n}",
    )


def state_grid(p_t: GaussianDist, q_t: GaussianDist, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` scrambled-Sobol points mapped through Gaussian quantiles of the moment-matched mixture of ``p_t`` and ``q_t``."""
    d = p_t.dim
    mean = 0.5 * (p_t.mean + q_t.mean)
    dm = p_t.mean - q_t.mean
    cov = 0.5 * (p_t.cov + q_t.cov) + 0.25 * np.outer(dm, dm)
    m = max(1, math.ceil(math.log2(n)))
    u = qmc.Sobol(d, scramble=True, seed=rng).random_base2(m)[:n]
    u = np.clip(u, 1e-12, 1 - 1e-12)
    return mean + norm.ppf(u) @ cholesky(cov).T


def check_advantage_bound(env: LinearEnv, p: list[LinGaussPolicy], q: list[LinGaussPolicy],
                          n: int, rng: np.random.Generator,
                          tol: float = CLOSED_FORM_TOL) -> BoundCheckReport:
    """``J(p) - J(q) >= sum_t E_{q_t, p}[A_t^q] - 2 sum_t delta_t sqrt(eps_t / 2)``.

    Everything is closed form except ``delta_t = max_s |E_{a~p}[A_t^q(s,a)]|``,
    which is maximised over ``n`` grid points. The grid maximum can only
    underestimate the true one, so a failure may be spurious but a pass is
    sound.
    """
    qs, _ = lqr.evaluate_policy(env, q)
    rp, rq = _state_marginals(env, p), _state_marginals(env, q)
    lhs = lqr.policy_return(env, p) - lqr.policy_return(env, q)
    surrogate, penalty = 0.0, 0.0
    for t in range(env.spec.T):
        adv = lqr.advantage(qs[t], q[t])
        surrogate += lqr.expected_q(adv, joint_state_action(rq[t], p[t]))
        mean_adv = lqr.v_from_q(adv, p[t])
        grid = state_grid(rp[t], rq[t], n, rng)
        delta = float(np.max(np.abs(mean_adv(grid))))
        eps_t = kl_gaussian(rp[t], rq[t])
        penalty += 2.0 * delta * math.sqrt(eps_t / 2.0)
    rhs = surrogate - penalty
    slack = lhs - rhs
    return BoundCheckReport(
        "advantage_bound", "J(p) - J(q) >= surrogate - 2 sum delta_t sqrt(eps_t/2)",
        float(lhs), float(rhs), float(slack), slack >= -tol, tolerance=tol,
        note=f"delta_t maximised over a {n}-point grid (a lower bound on the true supremum)",
    )


def theorem1_reports(env: LinearEnv, policies: list[list[LinGaussPolicy]], n: int,
                     rng: np.random.Generator) -> list[BoundCheckReport]:
    """Advantage bound between consecutive iterates of an optimisation run (report only)."""
    out = []
    for i in range(len(policies) - 1):
        r = check_advantage_bound(env, policies[i + 1], policies[i], n, rng)
        out.append(BoundCheckReport(f"theorem1[iter={i}]", r.description, r.lhs, r.rhs, r.slack,
                                    r.passed, tolerance=r.tolerance, note=r.note))
    return out


# ------------------------------------------------------------------ suites


def run_suite(seed: int = 0, n_instances: int = 1000, n_rollouts: int = 100_000,
              grid: int = 10_000) -> list[BoundCheckReport]:
    """Everything the ``verify-bounds`` command runs."""
    rng = np.random.default_rng(seed)
    reports = appendix_b_suite(rng, n_instances)
    # (1 - log 2) / 2 puts the variance ratio at 2, where inequality (i) is tightest
    for eps_t in (1e-3, 0.5 * (1 - math.log(2)), 1.0):
        inst = near_tight_isotropic(eps_t)
        for r in check_appendix_b(inst.p_t, inst.q_t, inst.p_pol, inst.q_pol, inst.eps, inst.eps_t):
            if r.name == "appendix_b.i":
                reports.append(BoundCheckReport(f"{r.name}[isotropic eps_t={eps_t}]", r.description,
                                                r.lhs, r.rhs, r.slack, r.passed, note="near-tight"))
    env = random_linear_env(rng)
    q = [random_lin_policy(rng, env.spec.d_s, env.spec.d_a) for _ in range(env.spec.T)]
    p = perturb_policy(rng, q)
    reports.append(check_perf_diff(env, p, q, n_rollouts, rng))
    reports.append(check_advantage_bound(env, p, q, grid, rng))
    reports += check_state_kl_recursion(env, p, q)
    return reports


def write_reports_csv(path, reports: list[BoundCheckReport]) -> None:
    fields = list(BoundCheckReport.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in reports:
            row = asdict(r)
            for k, v in row.items():
                if isinstance(v, float):
                    row[k] = f"{v:.17g}"
            w.writerow(row)
