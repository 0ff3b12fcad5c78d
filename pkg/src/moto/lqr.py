"""Exact Riccati recursions on the linear-quadratic environment.

Used as correctness oracles: exact Q/V of a given time-dependent
linear-Gaussian policy, the optimal policy, and Gaussian state marginals.
"""
from __future__ import annotations

import numpy as np

from .env import LinearEnv
from .gauss import GaussianDist, LinGaussPolicy, symmetrize
from .qmodel import QuadraticModel, QuadraticV


def q_from_v(env: LinearEnv, v_next: QuadraticV) -> QuadraticModel:
    """``Q(s,a) = r(s,a) + E[V_next(As + Ba + xi)]``."""
    p = env.params
    V, v, v0 = v_next.V_ss, v_next.v_s, v_next.v_0
    return QuadraticModel(
        Q_aa=symmetrize(p.R_aa + p.B.T @ V @ p.B),
        Q_as=p.B.T @ V @ p.A,
        Q_ss=symmetrize(p.R_ss + p.A.T @ V @ p.A),
        q_a=p.B.T @ v,
        q_s=p.r_s + p.A.T @ v,
        q_0=float(v0 + 0.5 * np.trace(V @ p.noise_cov)),
    )


def v_from_q(q: QuadraticModel, policy: LinGaussPolicy) -> QuadraticV:
    """``V(s) = E_{a ~ policy(.|s)} Q(s, a)``."""
    K, k, S = policy.gain, policy.bias, policy.cov
    cross = K.T @ q.Q_as
    V = q.Q_ss + K.T @ q.Q_aa @ K + cross + cross.T
    v = q.q_s + K.T @ q.Q_aa @ k + q.Q_as.T @ k + K.T @ q.q_a
    v0 = q.q_0 + 0.5 * k @ q.Q_aa @ k + 0.5 * np.trace(q.Q_aa @ S) + k @ q.q_a
    return QuadraticV(symmetrize(V), v, float(v0))


def advantage(q: QuadraticModel, policy: LinGaussPolicy) -> QuadraticModel:
    """``A(s,a) = Q(s,a) - V(s)`` as a quadratic model."""
    v = v_from_q(q, policy)
    return QuadraticModel(q.Q_aa, q.Q_as, symmetrize(q.Q_ss - v.V_ss), q.q_a, q.q_s - v.v_s,
                          q.q_0 - v.v_0)


def evaluate_policy(env: LinearEnv, policy: list[LinGaussPolicy]):
    """Exact per-step Q and V of ``policy`` (lists indexed by ``t - 1``)."""
    T = env.spec.T
    v_next = QuadraticV.zero(env.spec.d_s)
    qs, vs = [None] * T, [None] * T
    for t in reversed(range(T)):
        qs[t] = q_from_v(env, v_next)
        vs[t] = v_next = v_from_q(qs[t], policy[t])
    return qs, vs


def expected_value(v: QuadraticV, dist: GaussianDist) -> float:
    m, S = dist.mean, dist.cov
    return float(0.5 * (m @ v.V_ss @ m + np.trace(v.V_ss @ S)) + v.v_s @ m + v.v_0)


def expected_q(q: QuadraticModel, joint: GaussianDist) -> float:
    """``E[Q(s, a)]`` under a joint Gaussian over ``(s, a)``."""
    h = np.block([[q.Q_ss, q.Q_as.T], [q.Q_as, q.Q_aa]])
    g = np.concatenate([q.q_s, q.q_a])
    m, S = joint.mean, joint.cov
    return float(0.5 * (m @ h @ m + np.trace(h @ S)) + g @ m + q.q_0)


def policy_return(env: LinearEnv, policy: list[LinGaussPolicy]) -> float:
    _, vs = evaluate_policy(env, policy)
    return expected_value(vs[0], env.initial_state_dist())


def optimal_policy(env: LinearEnv):
    """Deterministic optimal policy (returned with zero covariance) and its value functions."""
    T, d_s, d_a = env.spec.T, env.spec.d_s, env.spec.d_a
    v_next = QuadraticV.zero(d_s)
    gains, biases, vs, qs = [None] * T, [None] * T, [None] * T, [None] * T
    for t in reversed(range(T)):
        q = q_from_v(env, v_next)
        K = -np.linalg.solve(q.Q_aa, q.Q_as)
        k = -np.linalg.solve(q.Q_aa, q.q_a)
        gains[t], biases[t], qs[t] = K, k, q
        vs[t] = v_next = v_from_q(q, _DeterministicPolicy(K, k))
    return gains, biases, qs, vs


class _DeterministicPolicy:
    def __init__(self, gain, bias):
        self.gain, self.bias = gain, bias
        self.cov = np.zeros((bias.size, bias.size))


def optimal_return(env: LinearEnv) -> float:
    *_, vs = optimal_policy(env)
    return expected_value(vs[0], env.initial_state_dist())


def propagate(env: LinearEnv, policy: list[LinGaussPolicy]) -> list[GaussianDist]:
    """Gaussian state marginals ``rho_1 .. rho_{T+1}`` under ``policy``."""
    p = env.params
    dists = [env.initial_state_dist()]
    for pol in policy:
        rho = dists[-1]
        F = p.A + p.B @ pol.gain
        mean = F @ rho.mean + p.B @ pol.bias
        cov = F @ rho.cov @ F.T + p.B @ pol.cov @ p.B.T + p.noise_cov
        dists.append(GaussianDist(mean, symmetrize(cov)))
    return dists
