"""State-distribution estimation and importance weights for sample reuse.

The state-action density of iteration ``j`` at time-step ``t`` is
``z_t^j(s, a) = rho_t^j(s) pi_t^j(a|s)``, a joint Gaussian. All density
ratios are evaluated in log space and shifted by their maximum before
exponentiation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .gauss import GaussianDist, LinGaussPolicy, cholesky, joint_state_action, logdet_chol
from .gauss import LOG_2PI, weighted_mle_gaussian

log = logging.getLogger(__name__)

METHODS = ("mixture", "forward")


@dataclass(frozen=True)
class ReuseConfig:
    gamma: float = 0.6
    k_last: int = 10
    ess_floor: float = 5.0
    method: str = "mixture"

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.k_last < 1:
            raise ValueError("k_last must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")


def adapt_gamma(gamma: float, m_ref: int, m_new: int) -> float:
    """Decay giving the same per-rollout sample decay at ``m_new`` rollouts per iteration."""
    return gamma ** (m_new / m_ref)


def effective_sample_size(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        return 0.0
    return float(total**2 / np.sum(w**2))


def normalized_from_log(logw: np.ndarray) -> np.ndarray:
    """Exponentiate log weights after a max shift; result sums to one."""
    logw = np.asarray(logw, dtype=float)
    w = np.exp(logw - np.max(logw))
    return w / w.sum()


def log_z(rho: GaussianDist, policy: LinGaussPolicy, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``log rho(s) + log pi(a|s)``."""
    return rho.logpdf(s) + policy.logpdf(a, s)


def _series_logpdf(joints: list[GaussianDist], x: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Log densities of every Gaussian in ``joints`` at the rows of ``x``: shape ``(len, n)``."""
    out = np.empty((len(joints), x.shape[0]))
    d = x.shape[1]
    for start in range(0, len(joints), chunk):
        part = joints[start : start + chunk]
        chols = [cholesky(g.cov) for g in part]
        linv = np.stack([np.linalg.inv(c) for c in chols])
        means = np.stack([g.mean for g in part])
        consts = np.array([d * LOG_2PI + logdet_chol(c) for c in chols])
        diff = x[None, :, :] - means[:, None, :]
        white = diff @ linv.transpose(0, 2, 1)
        out[start : start + len(part)] = -0.5 * (np.sum(white**2, axis=2) + consts[:, None])
    return out


def joint_series(state_dists: list[GaussianDist], policy: list[LinGaussPolicy]) -> list[GaussianDist]:
    return [joint_state_action(r, p) for r, p in zip(state_dists, policy)]


def iw_timestep(s, a, t: int, rho_series: list[GaussianDist], policy: list[LinGaussPolicy]):
    """``z_t(s,a) / z(s,a)`` with ``z = (1/T) sum_t' z_t'`` (unnormalized)."""
    T = len(policy)
    s = np.atleast_2d(s)
    a = np.atleast_2d(a)
    logs = np.stack([log_z(r, p, s, a) for r, p in zip(rho_series, policy)])
    return np.exp(logs[t - 1] - (logsumexp(logs, axis=0) - np.log(T)))


def iw_full(s, a, t: int, i: int, histories: dict):
    """Combined cross-time, cross-iteration weight ``z_t^i / z^{1:i}``.

    ``histories`` maps iteration ``j`` to ``(rho_series_j, policy_j)`` and
    should only hold the iterations inside the reuse window.
    """
    s = np.atleast_2d(s)
    a = np.atleast_2d(a)
    rho_i, pol_i = histories[i]
    num = log_z(rho_i[t - 1], pol_i[t - 1], s, a)
    terms = []
    for rho_j, pol_j in histories.values():
        terms.extend(log_z(r, p, s, a) for r, p in zip(rho_j, pol_j))
    den = logsumexp(np.stack(terms), axis=0) - np.log(len(terms))
    return np.exp(num - den)


def fit_state_dist_mixture(dataset, t: int, i: int, gamma: float) -> GaussianDist:
    """Weighted MLE of states at ``t`` over stored iterations ``j <= i``, weights ``gamma^(i-j)``."""
    xs, ws = [], []
    for j in dataset.iterations():
        if j > i:
            continue
        s = dataset[j].batch.states[:, t - 1]
        xs.append(s)
        ws.append(np.full(len(s), gamma ** (i - j)))
    return weighted_mle_gaussian(np.concatenate(xs), np.concatenate(ws))


def fit_state_dist_forward(rho_t: GaussianDist, dataset, t: int, i: int, gamma: float,
                           ess_floor: float = 0.0, diagnostics: dict | None = None) -> GaussianDist:
    """``rho_{t+1}^i`` from next-states weighted by ``z_t^i / z_t^{1:i}``.

    Iterations other than ``i`` must already carry their state distributions.
    Falls back to the mixture estimate when the effective sample size drops
    below ``ess_floor``.
    """
    s_all, a_all, s2_all, owners = [], [], [], []
    for j in dataset.iterations():
        if j > i:
            continue
        s, a, _, s2 = dataset[j].batch.at(t)
        s_all.append(s)
        a_all.append(a)
        s2_all.append(s2)
        owners.append(j)
    s, a, s2 = (np.concatenate(x) for x in (s_all, a_all, s2_all))
    terms = []
    for j in owners:
        rho_j = rho_t if j == i else dataset[j].state_dists[t - 1]
        terms.append(log_z(rho_j, dataset[j].policy[t - 1], s, a))
    logw = terms[owners.index(i)] - logsumexp(np.stack(terms), axis=0)
    w = normalized_from_log(logw)
    ess = effective_sample_size(w)
    if diagnostics is not None:
        diagnostics["ess"] = ess
        diagnostics["fallback"] = False
    if ess < ess_floor:
        log.warning("forward state estimate at t=%d, iteration %d: ESS %.2f below %.2f; "
                    "falling back to the mixture estimate", t + 1, i, ess, ess_floor)
        if diagnostics is not None:
            diagnostics["fallback"] = True
        return fit_state_dist_mixture(dataset, t + 1, i, gamma)
    return weighted_mle_gaussian(s2, w)


def estimate_state_dists(dataset, i: int, cfg: ReuseConfig, rho_1: GaussianDist) -> list[GaussianDist]:
    """State distributions for every time-step of iteration ``i`` (``rho_1`` is shared)."""
    T = dataset[i].batch.T
    dists = [rho_1]
    if cfg.method == "mixture":
        dists += [fit_state_dist_mixture(dataset, t, i, cfg.gamma) for t in range(2, T + 1)]
    else:
        for t in range(1, T):
            dists.append(fit_state_dist_forward(dists[-1], dataset, t, i, cfg.gamma, cfg.ess_floor))
    return dists


def _flat(batch):
    """Transitions of a batch flattened episode-major: ``(s, a, s_next, t)``."""
    M, T = batch.M, batch.T
    s = batch.states[:, :T].reshape(M * T, -1)
    a = batch.actions.reshape(M * T, -1)
    s2 = batch.states[:, 1:].reshape(M * T, -1)
    t = np.tile(np.arange(1, T + 1), M)
    return s, a, s2, t


class ReusePool:
    """All stored transitions with cached mixture denominators ``log z^{1:i}``.

    ``log_mix`` of a sample only depends on the Gaussians of each stored
    iteration, so the per-pair log-sum-exp over time-steps is cached on the
    iteration items and only the new pairs are evaluated each iteration.
    """

    def __init__(self, dataset, with_mixture: bool = True):
        self.dataset = dataset
        items = dataset.items()
        joints = {it.batch.iteration: None for it in items}
        for it in items:
            if "joints" not in it.cache:
                it.cache["joints"] = joint_series(it.state_dists, it.policy)
            joints[it.batch.iteration] = it.cache["joints"]
        parts = [_flat(it.batch) for it in items]
        self.s = np.concatenate([p[0] for p in parts])
        self.a = np.concatenate([p[1] for p in parts])
        self.s_next = np.concatenate([p[2] for p in parts])
        self.t = np.concatenate([p[3] for p in parts])
        self.iteration = np.concatenate([np.full(len(p[3]), it.batch.iteration)
                                         for p, it in zip(parts, items)])
        self._x = np.concatenate([self.s, self.a], axis=1)
        self.log_mix = None
        self._own = {}
        if with_mixture:
            self.log_mix = self._mixture(items, parts, joints)

    def _mixture(self, items, parts, joints):
        per_item = []
        fresh = {}
        for it, p in zip(items, parts):
            x = np.concatenate([p[0], p[1]], axis=1)
            lse = it.cache.setdefault("lse", {})
            for j, js in joints.items():
                if j not in lse:
                    dens = _series_logpdf(js, x)
                    fresh.setdefault(j, []).append(dens)
                    lse[j] = logsumexp(dens, axis=0)
            for j in list(lse):
                if j not in joints:
                    del lse[j]
            per_item.append(np.stack([lse[j] for j in joints]))
        for j, blocks in fresh.items():
            if len(blocks) == len(items):
                self._own[j] = np.concatenate(blocks, axis=1)
        n_gauss = sum(len(js) for js in joints.values())
        return logsumexp(np.concatenate(per_item, axis=1), axis=0) - np.log(n_gauss)

    def log_weights(self, t: int, i: int) -> np.ndarray:
        """``log z_t^i - log z^{1:i}`` for every stored transition."""
        if i not in self._own:
            self._own[i] = _series_logpdf(self.dataset[i].cache["joints"], self._x)
        return self._own[i][t - 1] - self.log_mix

    def log_weights_same_step(self, t: int, i: int):
        """Indices of the transitions at step ``t`` and their weights ``log z_t^i - log z_t^{1:i}``."""
        idx = np.flatnonzero(self.t == t)
        x = self._x[idx]
        items = self.dataset.items()
        terms = np.stack([_series_logpdf([it.cache["joints"][t - 1]], x)[0] for it in items])
        own = [it.batch.iteration for it in items].index(i)
        return idx, terms[own] - (logsumexp(terms, axis=0) - np.log(len(items)))
