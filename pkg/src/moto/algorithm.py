"""The MOTO iteration loop: sample, then sweep backwards in time fitting and updating."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .gauss import LinGaussPolicy, weighted_mle_gaussian
from .qmodel import dp_targets, fit_q, fit_v
from .reuse import (
    ReuseConfig,
    ReusePool,
    effective_sample_size,
    estimate_state_dists,
    normalized_from_log,
)
from .rollout import Dataset, policy_return, sample_rollouts
from .update import update_timestep

log = logging.getLogger(__name__)

TARGET_MODES = ("dynamic_programming", "monte_carlo")


@dataclass(frozen=True)
class MotoConfig:
    eps: float = 0.1
    beta0: float = 0.1
    M: int = 20
    n_iters: int = 100
    gamma: float = 0.6
    k_last: int = 10
    ridge: float = 1e-6
    target_mode: str = "dynamic_programming"
    statedist_mode: str = "mixture"
    importance_sampling: bool = True
    init_var: float = 1.0
    ess_floor: float = 5.0
    # transitions whose normalized weight is below this fraction of the max are skipped
    weight_prune: float = 1e-10
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not self.beta0 >= 0:
            raise ValueError("beta0 must be >= 0")
        if self.M < 1 or self.n_iters < 0:
            raise ValueError("M must be >= 1 and n_iters >= 0")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}")
        if not self.init_var > 0:
            raise ValueError("init_var must be > 0")
        ReuseConfig(self.gamma, self.k_last, self.ess_floor, self.statedist_mode)

    @property
    def reuse(self) -> ReuseConfig:
        return ReuseConfig(self.gamma, self.k_last, self.ess_floor, self.statedist_mode)


@dataclass
class IterationLog:
    iteration: int
    return_mean: float
    return_stderr: float
    eta: np.ndarray
    omega: np.ndarray
    kl: np.ndarray
    entropy: np.ndarray
    ess: np.ndarray
    dual_iterations: np.ndarray
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "iter": self.iteration,
            "return_mean": self.return_mean,
            "return_stderr": self.return_stderr,
            "kl_mean": float(np.mean(self.kl)),
            "entropy_mean": float(np.mean(self.entropy)),
            "ess_min": float(np.min(self.ess)),
            "eta_mean": float(np.mean(self.eta)),
            "omega_mean": float(np.mean(self.omega)),
            "seconds": self.seconds,
        }


def init_policy(env, config: MotoConfig) -> list[LinGaussPolicy]:
    """Zero gains and biases, covariance ``init_var * I`` at every time-step."""
    d_s, d_a, T = env.spec.d_s, env.spec.d_a, env.spec.T
    pol = LinGaussPolicy(np.zeros((d_a, d_s)), np.zeros(d_a), config.init_var * np.eye(d_a))
    return [pol] * T


def _training_set(pool: ReusePool, t: int, i: int, config: MotoConfig):
    """Indices into the pool and normalized weights of the transitions used at step ``t``."""
    if not config.importance_sampling:
        idx = np.flatnonzero((pool.t == t) & (pool.iteration == i))
        return idx, np.full(len(idx), 1.0 / len(idx))
    if config.target_mode == "monte_carlo":
        idx, logw = pool.log_weights_same_step(t, i)
    else:
        idx, logw = np.arange(len(pool.t)), pool.log_weights(t, i)
    w = normalized_from_log(logw)
    keep = w > config.weight_prune * np.max(w)
    return idx[keep], w[keep] / w[keep].sum()


def _mc_suffix(dataset, pool: ReusePool) -> np.ndarray:
    """Monte-Carlo return-to-go of every pooled transition."""
    parts = []
    for it in dataset.items():
        r = it.batch.rewards
        parts.append(np.cumsum(r[:, ::-1], axis=1)[:, ::-1].reshape(-1))
    return np.concatenate(parts)


def moto_iteration(env, policy, dataset: Dataset, i: int, config: MotoConfig, rho_1=None):
    """One outer iteration; returns ``(new_policy, log, rho_1)``."""
    start = time.perf_counter()
    T = env.spec.T
    batch = sample_rollouts(env, policy, config.M, config.seed, i, config.threads)
    item = dataset.add(batch, policy)
    if rho_1 is None:
        rho_1 = weighted_mle_gaussian(batch.states[:, 0])
    item.state_dists = estimate_state_dists(dataset, i, config.reuse, rho_1)
    pool = ReusePool(dataset, with_mixture=config.importance_sampling)
    suffix = _mc_suffix(dataset, pool) if config.target_mode == "monte_carlo" else None

    new_policy = list(policy)
    eta, omega, kl, ent, ess, dual_it = (np.zeros(T) for _ in range(6))
    v_next = None
    for t in range(T, 0, -1):
        idx, w = _training_set(pool, t, i, config)
        ess[t - 1] = effective_sample_size(w)
        s, a = pool.s[idx], pool.a[idx]
        if config.target_mode == "monte_carlo":
            targets = suffix[idx]
        else:
            r = env.reward(t, s, a)
            targets = dp_targets(r, pool.s_next[idx], v_next)
        q = fit_q(s, a, targets, w, config.ridge)
        if config.target_mode == "dynamic_programming":
            v_next = fit_v(s, targets, w, config.ridge)
        res = update_timestep(policy[t - 1], q, item.state_dists[t - 1], config.eps, config.beta0)
        new_policy[t - 1] = res.new_policy
        eta[t - 1], omega[t - 1] = res.eta_star, res.omega_star
        kl[t - 1], ent[t - 1], dual_it[t - 1] = res.achieved_kl, res.achieved_entropy, res.iterations
    mean, se = policy_return(batch)
    entry = IterationLog(i, mean, se, eta, omega, kl, ent, ess, dual_it,
                         time.perf_counter() - start)
    return new_policy, entry, rho_1


def run(env, config: MotoConfig, callback=None):
    """Run ``config.n_iters`` iterations from the initial policy; returns ``(policy, logs)``.

    ``callback(log, policy)`` is invoked after every iteration with the
    updated policy (e.g. to flush a CSV).
    """
    policy = init_policy(env, config)
    dataset = Dataset(config.k_last)
    logs = []
    rho_1 = None
    for i in range(config.n_iters):
        policy, entry, rho_1 = moto_iteration(env, policy, dataset, i, config, rho_1)
        logs.append(entry)
        log.info("iter %d return %.6g +- %.3g", i, entry.return_mean, entry.return_stderr)
        if callback is not None:
            callback(entry, policy)
    return policy, logs
