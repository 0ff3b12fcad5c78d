"""Simulated environments: n-link pendulum swing-up and a linear-quadratic oracle.

Both environments accept batched inputs: states of shape ``(B, d_s)`` and
actions of shape ``(B, d_a)``, as well as single vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gauss import GaussianDist


class NonFiniteStateError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    d_s: int
    d_a: int
    T: int

    def __post_init__(self):
        if min(self.d_s, self.d_a, self.T) < 1:
            raise ValueError(f"invalid env spec {self}")


@dataclass(frozen=True)
class PendulumParams:
    n_links: int = 2
    masses: tuple = (1.0, 1.0)
    lengths: tuple = (1.0, 1.0)
    gravity: float = 9.81
    torque_limit: float = 25.0
    joint_limit_enabled: bool = False
    joint_threshold: float = 2.0 * np.pi / 3.0
    joint_kp: float = 100.0
    joint_kd: float = 10.0
    dt: float = 0.02
    substeps: int = 4
    horizon: int = 100
    cost_window: int = 20
    # one weight per state coordinate; None means angles 1e2, velocities 1e0
    state_cost_weights: tuple | None = None
    action_cost_weight: float = 1e-3
    init_std: float = 1e-2

    def __post_init__(self):
        if len(self.masses) != self.n_links or len(self.lengths) != self.n_links:
            raise ValueError("masses and lengths need one entry per link")
        if self.dt <= 0 or self.substeps < 1 or self.torque_limit <= 0:
            raise ValueError("dt and torque_limit must be positive, substeps >= 1")
        if not 0 <= self.cost_window <= self.horizon:
            raise ValueError("cost_window must lie in [0, horizon]")
        if self.state_cost_weights is None:
            w = (100.0,) * self.n_links + (1.0,) * self.n_links
            object.__setattr__(self, "state_cost_weights", w)
        if len(self.state_cost_weights) != 2 * self.n_links:
            raise ValueError("state_cost_weights needs 2 * n_links entries")


class PendulumEnv:
    """Planar n-link pendulum with point masses at the link tips.

    ``q[0]`` is the absolute angle of the first link measured from upright,
    ``q[j]`` the angle of link j relative to link j-1. Angles are never
    wrapped, so the upright null state is the unique cost minimum.
    """

    def __init__(self, params: PendulumParams | None = None):
        self.params = params or PendulumParams()
        p = self.params
        n = p.n_links
        self.spec = EnvSpec(2 * n, n, p.horizon)
        self._m = np.asarray(p.masses, dtype=float)
        self._l = np.asarray(p.lengths, dtype=float)
        # mass carried at or beyond each pair of links
        tail = np.cumsum(self._m[::-1])[::-1]
        self._a = tail[np.maximum.outer(np.arange(n), np.arange(n))] * np.outer(self._l, self._l)
        self._grav = tail * self._l * p.gravity
        self._sel = np.tril(np.ones((n, n)))
        self._wstate = np.asarray(p.state_cost_weights, dtype=float)

    @property
    def hanging_state(self) -> np.ndarray:
        s = np.zeros(self.spec.d_s)
        s[0] = np.pi
        return s

    def initial_state_dist(self) -> GaussianDist:
        d = self.spec.d_s
        return GaussianDist(self.hanging_state, self.params.init_std**2 * np.eye(d))

    def initial_state(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = (1 if n is None else n, self.spec.d_s)
        s = self.hanging_state + self.params.init_std * rng.standard_normal(size)
        return s[0] if n is None else s

    def clip(self, a: np.ndarray) -> np.ndarray:
        lim = self.params.torque_limit
        return np.clip(a, -lim, lim)

    def _accel(self, q, qd, tau):
        n = self.params.n_links
        theta = q @ self._sel.T
        thetad = qd @ self._sel.T
        diff = theta[:, :, None] - theta[:, None, :]
        mass_abs = self._a * np.cos(diff)
        coriolis = np.sum(self._a * np.sin(diff) * thetad[:, None, :] ** 2, axis=2)
        dpot = -self._grav * np.sin(theta)
        # relative coordinates: theta = S q, generalized forces map through S^T
        mass = np.einsum("ji,bjk,kl->bil", self._sel, mass_abs, self._sel)
        rhs = tau - np.einsum("ji,bj->bi", self._sel, coriolis + dpot)
        return np.linalg.solve(mass, rhs[:, :, None])[:, :, 0].reshape(-1, n)

    def _torque(self, q, qd, a):
        p = self.params
        tau = np.array(a, dtype=float, copy=True)
        if p.joint_limit_enabled and p.n_links > 1:
            qj, qdj = q[:, 1:], qd[:, 1:]
            out = np.abs(qj) > p.joint_threshold
            push = -p.joint_kp * (qj - np.sign(qj) * p.joint_threshold) - p.joint_kd * qdj
            tau[:, 1:] = np.where(out, push, tau[:, 1:])
        return self.clip(tau)

    def _deriv(self, x, a):
        n = self.params.n_links
        q, qd = x[:, :n], x[:, n:]
        return np.concatenate([qd, self._accel(q, qd, self._torque(q, qd, a))], axis=1)

    def step(self, state: np.ndarray, action: np.ndarray, rng=None, noise=None) -> np.ndarray:
        """One control step of fixed-step RK4; actions are clipped to the torque limit.

        ``rng`` and ``noise`` are accepted for interface parity and ignored:
        the pendulum is deterministic.
        """
        single = np.ndim(state) == 1
        x = np.atleast_2d(np.asarray(state, dtype=float))
        a = self.clip(np.atleast_2d(np.asarray(action, dtype=float)))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(a))):
            raise NonFiniteStateError("non-finite state or action passed to pendulum_step")
        h = self.params.dt / self.params.substeps
        for _ in range(self.params.substeps):
            k1 = self._deriv(x, a)
            k2 = self._deriv(x + 0.5 * h * k1, a)
            k3 = self._deriv(x + 0.5 * h * k2, a)
            k4 = self._deriv(x + h * k3, a)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return x[0] if single else x

    def reward(self, t: int, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Reward at 1-based time-step ``t``."""
        p = self.params
        a = self.clip(np.asarray(a, dtype=float))
        r = -p.action_cost_weight * np.sum(a**2, axis=-1)
        if t > p.horizon - p.cost_window:
            r = r - np.sum(self._wstate * np.asarray(s, dtype=float) ** 2, axis=-1)
        return r

    def energy(self, state: np.ndarray) -> np.ndarray:
        """Total mechanical energy (kinetic + potential, upright is maximal)."""
        n = self.params.n_links
        x = np.atleast_2d(state)
        theta = x[:, :n] @ self._sel.T
        thetad = x[:, n:] @ self._sel.T
        mass_abs = self._a * np.cos(theta[:, :, None] - theta[:, None, :])
        kin = 0.5 * np.einsum("bi,bij,bj->b", thetad, mass_abs, thetad)
        pot = np.sum(self._grav * np.cos(theta), axis=1)
        e = kin + pot
        return e[0] if np.ndim(state) == 1 else e


@dataclass(frozen=True)
class LinearEnvParams:
    A: np.ndarray
    B: np.ndarray
    noise_cov: np.ndarray
    R_ss: np.ndarray
    R_aa: np.ndarray
    r_s: np.ndarray
    initial_state_dist: GaussianDist
    horizon: int = 20

    def __post_init__(self):
        arr = lambda x: np.atleast_2d(np.asarray(x, dtype=float))  # noqa: E731
        for name in ("A", "B", "noise_cov", "R_ss", "R_aa"):
            object.__setattr__(self, name, arr(getattr(self, name)))
        object.__setattr__(self, "r_s", np.atleast_1d(np.asarray(self.r_s, dtype=float)))
        d_s, d_a = self.B.shape
        if self.A.shape != (d_s, d_s) or self.noise_cov.shape != (d_s, d_s):
            raise ValueError("A and noise_cov must be d_s x d_s")
        if self.R_ss.shape != (d_s, d_s) or self.R_aa.shape != (d_a, d_a) or self.r_s.shape != (d_s,):
            raise ValueError("reward matrices have inconsistent shapes")
        if self.initial_state_dist.dim != d_s:
            raise ValueError("initial state distribution has wrong dimension")
        if np.max(np.linalg.eigvalsh(0.5 * (self.R_aa + self.R_aa.T))) >= 0:
            raise ValueError("R_aa must be negative definite")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


class LinearEnv:
    """``s' = A s + B a + xi`` with reward ``1/2 s'R_ss s + 1/2 a'R_aa a + s'r_s``."""

    def __init__(self, params: LinearEnvParams):
        self.params = params
        d_s, d_a = params.B.shape
        self.spec = EnvSpec(d_s, d_a, params.horizon)
        # symmetric square root, valid for singular (PSD) noise
        vals, vecs = np.linalg.eigh(0.5 * (params.noise_cov + params.noise_cov.T))
        if vals.min() < -1e-12 * max(1.0, vals.max()):
            raise ValueError("noise_cov must be positive semidefinite")
        self._noise_chol = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T

    def initial_state_dist(self) -> GaussianDist:
        return self.params.initial_state_dist

    def initial_state(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        s = self.params.initial_state_dist.sample(rng, 1 if n is None else n)
        return s[0] if n is None else s

    def mean_step(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        p = self.params
        return np.asarray(s, dtype=float) @ p.A.T + np.asarray(a, dtype=float) @ p.B.T

    def step(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator | None = None,
             noise: np.ndarray | None = None) -> np.ndarray:
        """Next state; pass either ``rng`` or pre-drawn standard normal ``noise``."""
        nxt = self.mean_step(s, a)
        if noise is None and rng is not None:
            noise = rng.standard_normal(np.shape(nxt))
        if noise is not None:
            nxt = nxt + noise @ self._noise_chol.T
        return nxt

    def reward(self, t: int, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        p = self.params
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return (
            0.5 * np.sum((s @ p.R_ss) * s, axis=-1)
            + 0.5 * np.sum((a @ p.R_aa) * a, axis=-1)
            + s @ p.r_s
        )


def linear_step(params: LinearEnvParams, s, a, rng) -> np.ndarray:
    return LinearEnv(params).step(s, a, rng)


def linear_reward(params: LinearEnvParams, s, a) -> np.ndarray:
    return LinearEnv(params).reward(1, s, a)


def pendulum_step(params: PendulumParams, state, action) -> np.ndarray:
    return PendulumEnv(params).step(state, action)


def reward(params: PendulumParams, t: int, s, a) -> np.ndarray:
    return PendulumEnv(params).reward(t, s, a)
