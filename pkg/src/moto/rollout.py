"""Trajectory sampling and dataset bookkeeping."""
from __future__ import annotations

import csv
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .env import NonFiniteStateError
from .gauss import GaussianDist, LinGaussPolicy, cholesky


@dataclass(frozen=True)
class TransitionRecord:
    iter: int
    t: int
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray


@dataclass
class Batch:
    """``M`` trajectories of one iteration. Time index ``t`` is 1-based in the API."""

    iteration: int
    states: np.ndarray  # (M, T+1, d_s)
    actions: np.ndarray  # (M, T, d_a), as sampled (before torque clipping)
    rewards: np.ndarray  # (M, T)

    @property
    def M(self) -> int:
        return self.rewards.shape[0]

    @property
    def T(self) -> int:
        return self.rewards.shape[1]

    def at(self, t: int):
        """``(s, a, r, s_next)`` arrays for all episodes at time-step ``t``."""
        i = t - 1
        return self.states[:, i], self.actions[:, i], self.rewards[:, i], self.states[:, i + 1]

    def records(self) -> Iterator[TransitionRecord]:
        for t in range(1, self.T + 1):
            s, a, r, s2 = self.at(t)
            for k in range(self.M):
                yield TransitionRecord(self.iteration, t, s[k], a[k], float(r[k]), s2[k])

    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


# episodes are simulated in blocks whose boundaries depend on M only, so the
# floating-point results do not change with the thread count
BLOCK = 10


def episode_rng(seed: int, iteration: int, episode: int) -> np.random.Generator:
    """Independent stream per (seed, iteration, episode), regardless of scheduling."""
    return np.random.default_rng([seed, iteration, episode])


def _simulate(env, policy, init_dist, xi0, xa, xs):
    T = env.spec.T
    n = xi0.shape[0]
    states = np.empty((n, T + 1, env.spec.d_s))
    actions = np.empty((n, T, env.spec.d_a))
    rewards = np.empty((n, T))
    init_chol = cholesky(init_dist.cov, "initial state covariance")
    s = init_dist.mean + xi0 @ init_chol.T
    states[:, 0] = s
    chols = [cholesky(p.cov, f"policy covariance at t={t + 1}") for t, p in enumerate(policy)]
    for t in range(T):
        pol = policy[t]
        a = pol.mean(s) + xa[:, t] @ chols[t].T
        actions[:, t] = a
        rewards[:, t] = env.reward(t + 1, s, a)
        s = env.step(s, a, noise=xs[:, t])
        states[:, t + 1] = s
        if not np.all(np.isfinite(s)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(s), axis=1))[0])
            raise NonFiniteStateError((bad, t + 1))
    return states, actions, rewards


def sample_rollouts(
    env,
    policy: list[LinGaussPolicy],
    M: int,
    seed: int = 0,
    iteration: int = 0,
    threads: int = 1,
) -> Batch:
    """Execute ``policy`` for ``M`` episodes; actions ``a_t ~ N(K_t s_t + k_t, Sigma_t)``."""
    T, d_s, d_a = env.spec.T, env.spec.d_s, env.spec.d_a
    if len(policy) != T:
        raise ValueError(f"policy defines {len(policy)} steps, horizon is {T}")
    xi0 = np.empty((M, d_s))
    xa = np.empty((M, T, d_a))
    xs = np.empty((M, T, d_s))
    for k in range(M):
        rng = episode_rng(seed, iteration, k)
        xi0[k] = rng.standard_normal(d_s)
        xa[k] = rng.standard_normal((T, d_a))
        xs[k] = rng.standard_normal((T, d_s))
    init_dist = env.initial_state_dist()
    chunks = np.array_split(np.arange(M), -(-M // BLOCK))

    def run(idx):
        try:
            return _simulate(env, policy, init_dist, xi0[idx], xa[idx], xs[idx])
        except NonFiniteStateError as exc:
            ep, t = exc.args[0]
            raise NonFiniteStateError(
                f"non-finite state in episode {int(idx[ep])} at t={t} (iteration {iteration})"
            ) from None

    if len(chunks) == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max(1, min(threads, len(chunks)))) as pool:
            parts = list(pool.map(run, chunks))
    states, actions, rewards = (np.concatenate(x, axis=0) for x in zip(*parts))
    return Batch(iteration, states, actions, rewards)


def policy_return(batch_or_returns) -> tuple[float, float]:
    """Mean return over episodes and its standard error (NaN for a single episode)."""
    ret = batch_or_returns.returns() if isinstance(batch_or_returns, Batch) else np.asarray(
        batch_or_returns, dtype=float
    )
    n = ret.size
    mean = float(ret.mean())
    if n < 2:
        return mean, float("nan")
    return mean, float(ret.std(ddof=1) / np.sqrt(n))


@dataclass
class IterationData:
    batch: Batch
    policy: list[LinGaussPolicy]
    state_dists: list[GaussianDist] | None = None
    cache: dict = field(default_factory=dict)


class Dataset:
    """Transitions, sampling policies and state distributions of the last ``k_last`` iterations."""

    def __init__(self, k_last: int = 10):
        if k_last < 1:
            raise ValueError("k_last must be >= 1")
        self.k_last = k_last
        self._items: OrderedDict[int, IterationData] = OrderedDict()

    def add(self, batch: Batch, policy: list[LinGaussPolicy]) -> IterationData:
        item = IterationData(batch, list(policy))
        self._items[batch.iteration] = item
        while len(self._items) > self.k_last:
            self._items.popitem(last=False)
        return item

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, iteration: int) -> IterationData:
        return self._items[iteration]

    def iterations(self) -> list[int]:
        return list(self._items)

    def items(self):
        return list(self._items.values())

    def latest(self) -> IterationData:
        return next(reversed(self._items.values()))

    def records(self, t: int | None = None) -> Iterator[TransitionRecord]:
        for item in self._items.values():
            for rec in item.batch.records():
                if t is None or rec.t == t:
                    yield rec


def dump_csv(path, batches: list[Batch]):
    """Write transitions as CSV with header ``iter,t,episode,s...,a...,r``."""
    if not batches:
        raise ValueError("nothing to write")
    d_s = batches[0].states.shape[2]
    d_a = batches[0].actions.shape[2]
    header = ["iter", "t", "episode"] + [f"s{j}" for j in range(d_s)] + [f"a{j}" for j in range(d_a)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header + ["r"])
        for b in batches:
            for t in range(1, b.T + 1):
                s, a, r, _ = b.at(t)
                for k in range(b.M):
                    w.writerow([b.iteration, t, k] + [f"{x:.17g}" for x in s[k]]
                               + [f"{x:.17g}" for x in a[k]] + [f"{r[k]:.17g}"])
