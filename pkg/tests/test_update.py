import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from moto.gauss import GaussianDist, LinGaussPolicy, expected_policy_kl, joint_state_action
from moto.lqr import expected_q
from moto.qmodel import QuadraticModel
from moto.update import (
    DualVars,
    InfeasibleDualError,
    closed_form_update,
    dual_gradient,
    dual_value,
    entropy_target,
    eta_floor,
    minimize_dual,
    optimal_omega,
    update_timestep,
)


def _spd(rng, d, lo=0.3, hi=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * rng.uniform(lo, hi, d)) @ q.T


def _instance(rng, d_s, d_a, concave=True):
    pol = LinGaussPolicy(rng.standard_normal((d_a, d_s)), rng.standard_normal(d_a), _spd(rng, d_a))
    rho = GaussianDist(rng.standard_normal(d_s), _spd(rng, d_s))
    Q_aa = -_spd(rng, d_a) if concave else _spd(rng, d_a, 0.1, 0.5)
    q = QuadraticModel(Q_aa=Q_aa, Q_as=rng.standard_normal((d_a, d_s)), Q_ss=-np.eye(d_s),
                       q_a=rng.standard_normal(d_a), q_s=np.zeros(d_s), q_0=0.0)
    return pol, rho, q


def _blocks(q):
    return q.Q_aa, q.Q_as, q.q_a


class TestDualOracle:
    def _quadrature_dual(self, dv, q, pol, rho, eps, beta):
        # eta eps - omega beta + lam E_rho log int pi(a|s)^(eta/lam) exp(Q_a(s,a)/lam) da
        lam = dv.eta + dv.omega
        sd = np.sqrt(pol.cov[0, 0])

        def inner(s):
            m = float(pol.mean(np.array([s]))[0])
            peak = m + (q.Q_as[0, 0] * s + q.q_a[0]) / max(-q.Q_aa[0, 0], 1e-3)
            qa = lambda a: 0.5 * q.Q_aa[0, 0] * a * a + q.Q_as[0, 0] * a * s + q.q_a[0] * a  # noqa: E731
            logf = lambda a: (dv.eta / lam) * stats.norm.logpdf(a, m, sd) + qa(a) / lam  # noqa: E731
            grid = np.linspace(min(m, peak) - 40 * sd, max(m, peak) + 40 * sd, 2001)
            shift = np.max(logf(grid))
            val = integrate.quad(lambda a: np.exp(logf(a) - shift), grid[0], grid[-1],
                                 points=[m, peak], limit=400, epsabs=0, epsrel=1e-13)[0]
            return np.log(val) + shift

        nodes, weights = np.polynomial.hermite_e.hermegauss(60)
        s_nodes = rho.mean[0] + np.sqrt(rho.cov[0, 0]) * nodes
        expect = sum(w * inner(s) for s, w in zip(s_nodes, weights)) / np.sqrt(2 * np.pi)
        return dv.eta * eps - dv.omega * beta + lam * expect

    @pytest.mark.parametrize("seed", range(6))
    def test_closed_form_dual_matches_quadrature(self, seed):
        rng = np.random.default_rng(seed)
        pol, rho, q = _instance(rng, 1, 1)
        eps, beta = 0.3, pol.entropy() - 0.2
        dv = DualVars(float(rng.uniform(0.5, 5.0)), float(rng.uniform(0.0, 2.0)))
        ref = self._quadrature_dual(dv, q, pol, rho, eps, beta)
        assert dual_value(dv, _blocks(q), pol, rho, eps, beta) == pytest.approx(ref, rel=1e-9, abs=1e-9)

    def test_dual_upper_bounds_constrained_value(self):
        # weak duality: g(eta, omega) >= E[Q_a] under any feasible policy, here the old one
        rng = np.random.default_rng(10)
        pol, rho, q = _instance(rng, 2, 2)
        eps, beta = 0.2, pol.entropy() - 0.5
        qa = QuadraticModel(q.Q_aa, q.Q_as, np.zeros((2, 2)), q.q_a, np.zeros(2), 0.0)
        old_val = expected_q(qa, joint_state_action(rho, pol))
        for _ in range(20):
            dv = DualVars(float(rng.uniform(1.0, 20.0)), float(rng.uniform(0.0, 5.0)))
            assert dual_value(dv, _blocks(q), pol, rho, eps, beta) >= old_val - 1e-9


class TestGradient:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 3))
    def test_matches_central_differences(self, seed, d_s, d_a):
        rng = np.random.default_rng(seed)
        pol, rho, q = _instance(rng, d_s, d_a)
        eps, beta = 0.1, pol.entropy() - 0.3
        dv = DualVars(float(rng.uniform(0.5, 10.0)), float(rng.uniform(0.1, 3.0)))
        g = np.array(dual_gradient(dv, _blocks(q), pol, rho, eps, beta))
        h = 1e-5
        fd = []
        for e in np.eye(2):
            hi = DualVars(dv.eta + h * e[0] * dv.eta, dv.omega + h * e[1] * dv.eta)
            lo = DualVars(dv.eta - h * e[0] * dv.eta, dv.omega - h * e[1] * dv.eta)
            fd.append((dual_value(hi, _blocks(q), pol, rho, eps, beta)
                       - dual_value(lo, _blocks(q), pol, rho, eps, beta)) / (2 * h * dv.eta))
        assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))

    def test_eta_derivative_is_kl_slack(self):
        rng = np.random.default_rng(11)
        pol, rho, q = _instance(rng, 3, 2)
        dv = DualVars(2.0, 0.5)
        new = closed_form_update(pol, _blocks(q), dv)
        d_eta, _ = dual_gradient(dv, _blocks(q), pol, rho, 0.25, 0.0)
        assert d_eta == pytest.approx(0.25 - expected_policy_kl(rho, new, pol), rel=1e-10)

    def test_omega_derivative_is_entropy_slack(self):
        rng = np.random.default_rng(12)
        pol, rho, q = _instance(rng, 2, 2)
        dv = DualVars(3.0, 0.7)
        new = closed_form_update(pol, _blocks(q), dv)
        _, d_omega = dual_gradient(dv, _blocks(q), pol, rho, 0.1, -1.0)
        assert d_omega == pytest.approx(new.entropy() - (-1.0), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dual_is_convex_along_segments(seed):
    rng = np.random.default_rng(seed)
    pol, rho, q = _instance(rng, 2, 2)
    eps, beta = 0.1, pol.entropy() - 0.2
    a = np.array([rng.uniform(1.0, 10.0), rng.uniform(0.0, 3.0)])
    b = np.array([rng.uniform(1.0, 10.0), rng.uniform(0.0, 3.0)])
    g = lambda x: dual_value(DualVars(*x), _blocks(q), pol, rho, eps, beta)  # noqa: E731
    assert g(0.5 * (a + b)) <= 0.5 * (g(a) + g(b)) + 1e-9 * (1 + abs(g(a)) + abs(g(b)))


class TestMinimizer:
    @pytest.mark.parametrize("seed", range(10))
    def test_kl_constraint_is_met(self, seed):
        rng = np.random.default_rng(seed)
        pol, rho, q = _instance(rng, 3, 2)
        res = update_timestep(pol, q, rho, 0.05, np.inf)
        assert res.omega_star == 0.0
        assert res.achieved_kl == pytest.approx(0.05, abs=1e-9)

    def test_stationary_point_is_dual_minimum(self):
        rng = np.random.default_rng(20)
        pol, rho, q = _instance(rng, 2, 1)
        eps, beta0 = 0.1, 0.05
        beta = entropy_target(pol, beta0)
        dv, _ = minimize_dual(_blocks(q), pol, rho, eps, beta)
        g0 = dual_value(dv, _blocks(q), pol, rho, eps, beta)
        for d_eta in (-0.01, 0.01):
            for d_om in (0.0, 0.01):
                other = DualVars(dv.eta * (1 + d_eta), dv.omega + d_om)
                assert dual_value(other, _blocks(q), pol, rho, eps, beta) >= g0 - 1e-12

    def test_entropy_constraint_binds_when_q_is_sharp(self):
        # a sharply peaked Q pulls the variance down until the entropy bound holds it
        rng = np.random.default_rng(21)
        pol = LinGaussPolicy(np.zeros((1, 2)), np.zeros(1), np.eye(1))
        rho = GaussianDist(np.zeros(2), np.eye(2))
        q = QuadraticModel(-100.0 * np.eye(1), 0.1 * rng.standard_normal((1, 2)), -np.eye(2),
                           np.zeros(1), np.zeros(2), 0.0)
        res = update_timestep(pol, q, rho, 5.0, 0.1)
        assert res.omega_star > 0
        assert res.achieved_entropy == pytest.approx(pol.entropy() - 0.1, abs=1e-9)
        assert res.achieved_kl <= 5.0 + 1e-9

    def test_slack_kl_goes_to_floor_with_convex_q(self):
        # convex Q_aa needs eta above the floor, where the KL is large but finite
        rng = np.random.default_rng(22)
        pol, rho, q = _instance(rng, 2, 1, concave=False)
        floor = eta_floor(q.Q_aa, pol.cov)
        assert floor > 0
        binding = update_timestep(pol, q, rho, 1.0, np.inf)
        assert not binding.eta_at_floor and binding.eta_star > floor
        res = update_timestep(pol, q, rho, 1e12, np.inf)
        assert res.eta_at_floor and res.achieved_kl < 1e12
        assert res.eta_star == pytest.approx(1.001 * floor)
        with pytest.raises(InfeasibleDualError):
            closed_form_update(pol, _blocks(q), DualVars(0.5 * floor, 0.0))

    def test_zero_q_keeps_policy(self):
        rng = np.random.default_rng(23)
        pol, rho, _ = _instance(rng, 2, 2)
        q = QuadraticModel(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2),
                           np.zeros(2), 3.0)
        res = update_timestep(pol, q, rho, 0.1, 0.1)
        assert res.new_policy is pol
        assert res.achieved_kl == 0.0

    def test_large_eps_approaches_greedy_policy(self):
        rng = np.random.default_rng(24)
        pol, rho, q = _instance(rng, 2, 2)
        greedy_K = -np.linalg.solve(q.Q_aa, q.Q_as)
        greedy_k = -np.linalg.solve(q.Q_aa, q.q_a)
        errs = []
        for eps in (1.0, 10.0, 100.0):
            new = update_timestep(pol, q, rho, eps, np.inf).new_policy
            errs.append(np.linalg.norm(new.gain - greedy_K) + np.linalg.norm(new.bias - greedy_k))
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 1e-10 + 1e-3 * (np.linalg.norm(greedy_K) + np.linalg.norm(greedy_k))

    def test_small_eps_keeps_policy_close(self):
        rng = np.random.default_rng(25)
        pol, rho, q = _instance(rng, 2, 2)
        new = update_timestep(pol, q, rho, 1e-6, np.inf).new_policy
        assert np.linalg.norm(new.gain - pol.gain) < 1e-2
        assert np.linalg.norm(new.bias - pol.bias) < 1e-2

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_update_improves_expected_q(self, seed):
        rng = np.random.default_rng(seed)
        pol, rho, q = _instance(rng, 3, 2)
        res = update_timestep(pol, q, rho, 0.1, 0.1)
        before = expected_q(q, joint_state_action(rho, pol))
        after = expected_q(q, joint_state_action(rho, res.new_policy))
        assert after >= before - 1e-9 * (1 + abs(before))

    def test_update_beats_other_feasible_policies(self):
        # perturbations that stay inside both constraints never do better in expectation
        rng = np.random.default_rng(26)
        pol, rho, q = _instance(rng, 2, 1)
        eps, beta0 = 0.1, 0.05
        res = update_timestep(pol, q, rho, eps, beta0)
        best = expected_q(q, joint_state_action(rho, res.new_policy))
        n_checked = 0
        for _ in range(300):
            cand = LinGaussPolicy(res.new_policy.gain + 0.3 * rng.standard_normal((1, 2)),
                                  res.new_policy.bias + 0.3 * rng.standard_normal(1),
                                  res.new_policy.cov * np.exp(0.3 * rng.standard_normal()))
            if (expected_policy_kl(rho, cand, pol) <= eps
                    and cand.entropy() >= pol.entropy() - beta0):
                n_checked += 1
                assert expected_q(q, joint_state_action(rho, cand)) <= best + 1e-9
        assert n_checked > 5

    def test_optimal_omega_zero_without_entropy_bound(self):
        rng = np.random.default_rng(27)
        pol, _, q = _instance(rng, 2, 1)
        assert optimal_omega(1.0, _blocks(q), pol, -np.inf) == 0.0

    def test_rejects_nonpositive_eps(self):
        rng = np.random.default_rng(28)
        pol, rho, q = _instance(rng, 1, 1)
        with pytest.raises(ValueError):
            minimize_dual(_blocks(q), pol, rho, 0.0, -np.inf)


def test_update_covariance_formula():
    # 1-d closed form: F = 1/(eta/s2 - Q_aa), new variance (eta + omega) F
    pol = LinGaussPolicy([[0.5]], [0.2], [[2.0]])
    q = QuadraticModel([[-3.0]], [[1.0]], [[0.0]], [0.4], [0.0], 0.0)
    new = closed_form_update(pol, _blocks(q), DualVars(4.0, 1.0))
    F = 1.0 / (4.0 / 2.0 + 3.0)
    assert new.cov[0, 0] == pytest.approx(5.0 * F)
    assert new.gain[0, 0] == pytest.approx(F * (4.0 / 2.0 * 0.5 + 1.0))
    assert new.bias[0] == pytest.approx(F * (4.0 / 2.0 * 0.2 + 0.4))


class TestListedCases:
    def test_entropy_target_cases(self):
        pol = LinGaussPolicy(np.zeros((1, 1)), np.zeros(1), np.eye(1))
        h = 0.5 * np.log(2 * np.pi * np.e)
        assert entropy_target(pol, 0.0) == pytest.approx(h, abs=1e-15)
        assert entropy_target(pol, 0.1) == pytest.approx(h - 0.1, abs=1e-15)
        wide = LinGaussPolicy(np.zeros((3, 2)), np.zeros(3), np.diag([0.5, 2.0, 3.0]))
        assert entropy_target(wide, 0.5) == pytest.approx(wide.entropy() - 0.5, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_zero_blocks_dual_reduces_symbolically(self, seed):
        rng = np.random.default_rng(seed)
        d_a = 2
        sigma = _spd(rng, d_a)
        pol = LinGaussPolicy(np.zeros((d_a, 3)), np.zeros(d_a), sigma)
        rho = GaussianDist(rng.standard_normal(3), _spd(rng, 3))
        blocks = (np.zeros((d_a, d_a)), np.zeros((d_a, 3)), np.zeros(d_a))
        eta, omega, eps, beta = rng.uniform(0.1, 5.0, 4)
        logdet = np.linalg.slogdet(2 * np.pi * sigma)[1]
        logdet_new = np.linalg.slogdet(2 * np.pi * (eta + omega) * sigma / eta)[1]
        ref = eta * eps - omega * beta + 0.5 * (-eta * logdet + (eta + omega) * logdet_new)
        got = dual_value(DualVars(eta, omega), blocks, pol, rho, eps, beta)
        assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)

    def test_zero_blocks_keep_mean_map_and_rescale_covariance(self):
        rng = np.random.default_rng(30)
        pol, _, _ = _instance(rng, 2, 2)
        blocks = (np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2))
        beta = pol.entropy() + 0.4
        eta = 1.7
        omega = optimal_omega(eta, blocks, pol, beta)
        new = closed_form_update(pol, blocks, DualVars(eta, omega))
        np.testing.assert_allclose(new.gain, pol.gain, rtol=1e-12)
        np.testing.assert_allclose(new.bias, pol.bias, rtol=1e-12)
        np.testing.assert_allclose(new.cov, (eta + omega) / eta * pol.cov, rtol=1e-12)
        assert new.entropy() == pytest.approx(beta, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_vanishes_at_interior_optimum(self, seed):
        rng = np.random.default_rng(40 + seed)
        pol, rho, q = _instance(rng, 2, 2)
        res = update_timestep(pol, q, rho, 0.05, np.inf)
        assert not res.eta_at_floor
        g = dual_gradient(DualVars(res.eta_star, res.omega_star), _blocks(q), pol, rho, 0.05,
                          entropy_target(pol, np.inf))
        assert abs(g[0]) <= 1e-8
