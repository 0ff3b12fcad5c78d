import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import logsumexp
from scipy.stats import multivariate_normal as mvn

from moto import lqr
from moto.env import LinearEnv, LinearEnvParams
from moto.gauss import GaussianDist, LinGaussPolicy, joint_state_action, weighted_mle_gaussian
from moto.reuse import (
    ReuseConfig,
    ReusePool,
    adapt_gamma,
    effective_sample_size,
    estimate_state_dists,
    fit_state_dist_forward,
    fit_state_dist_mixture,
    iw_full,
    iw_timestep,
    log_z,
    normalized_from_log,
)
from moto.rollout import Dataset, sample_rollouts


@pytest.fixture
def env():
    return LinearEnv(LinearEnvParams(
        A=[[1.0, 0.1], [0.0, 1.0]], B=[[0.0], [0.1]], noise_cov=0.01 * np.eye(2),
        R_ss=-np.eye(2), R_aa=[[-0.1]], r_s=np.zeros(2),
        initial_state_dist=GaussianDist([1.0, 0.0], 0.1 * np.eye(2)), horizon=5))


def _policy(env, gain, var):
    return [LinGaussPolicy(np.array([gain]), np.array([0.2 * t]), var * np.eye(1))
            for t in range(env.spec.T)]


def _dataset(env, policies, M, k_last=10):
    """Dataset whose items carry the exact state marginals of their policies."""
    ds = Dataset(k_last)
    for i, pol in enumerate(policies):
        item = ds.add(sample_rollouts(env, pol, M, seed=0, iteration=i), pol)
        item.state_dists = lqr.propagate(env, pol)[: env.spec.T]
    return ds


def test_ess_extremes():
    assert effective_sample_size(np.ones(40)) == pytest.approx(40.0)
    assert effective_sample_size(np.eye(1, 40)[0]) == pytest.approx(1.0)
    assert effective_sample_size(np.zeros(3)) == 0.0


@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=50))
def test_ess_bounds(w):
    ess = effective_sample_size(np.array(w))
    assert 1.0 - 1e-9 <= ess <= len(w) + 1e-9


def test_normalized_from_log_is_shift_stable():
    logw = np.array([1000.0, 1001.0, 999.0])
    w = normalized_from_log(logw)
    np.testing.assert_allclose(w, normalized_from_log(logw - 1000.0))
    assert w.sum() == pytest.approx(1.0)
    assert np.all(np.isfinite(normalized_from_log(np.array([-1e4, -2e4]))))


def test_adapt_gamma():
    assert adapt_gamma(0.6, 20, 20) == 0.6
    assert adapt_gamma(0.6, 20, 40) == pytest.approx(0.36)


def test_reuse_config_validation():
    with pytest.raises(ValueError):
        ReuseConfig(gamma=0.0)
    with pytest.raises(ValueError):
        ReuseConfig(method="other")


def test_log_z_is_joint_density(env):
    pol = _policy(env, [-0.5, -0.1], 0.3)[0]
    rho = GaussianDist([0.3, -0.2], [[0.5, 0.1], [0.1, 0.4]])
    s, a = np.array([[0.1, 0.2]]), np.array([[0.4]])
    ref = joint_state_action(rho, pol).logpdf(np.concatenate([s, a], axis=1))
    np.testing.assert_allclose(log_z(rho, pol, s, a), ref, rtol=1e-12)


def test_timestep_weights_reweight_pooled_samples(env):
    # samples pooled over time-steps, reweighted to step t, reproduce rho_t moments
    pol = _policy(env, [-0.5, -0.1], 0.3)
    rho = lqr.propagate(env, pol)[: env.spec.T]
    batch = sample_rollouts(env, pol, 40_000, seed=1)
    s = batch.states[:, : env.spec.T].reshape(-1, 2)
    a = batch.actions.reshape(-1, 1)
    t = 4
    w = iw_timestep(s, a, t, rho, pol)
    assert w.mean() == pytest.approx(1.0, abs=0.02)
    est = (w[:, None] * s).sum(0) / w.sum()
    np.testing.assert_allclose(est, rho[t - 1].mean, atol=0.02)


def test_full_weight_single_iteration_equals_timestep(env):
    pol = _policy(env, [-0.5, -0.1], 0.3)
    rho = lqr.propagate(env, pol)[: env.spec.T]
    rng = np.random.default_rng(2)
    s, a = rng.standard_normal((10, 2)), rng.standard_normal((10, 1))
    np.testing.assert_allclose(iw_full(s, a, 2, 0, {0: (rho, pol)}), iw_timestep(s, a, 2, rho, pol),
                               rtol=1e-12)


def test_pool_weights_match_direct_formula(env):
    pols = [_policy(env, [-0.5, -0.1], 0.3), _policy(env, [-0.8, 0.0], 0.2),
            _policy(env, [-0.3, -0.3], 0.4)]
    ds = _dataset(env, pols, 6)
    pool = ReusePool(ds)
    hist = {j: (ds[j].state_dists, ds[j].policy) for j in ds.iterations()}
    for t in (1, 3, 5):
        ref = np.log(iw_full(pool.s, pool.a, t, 2, hist))
        np.testing.assert_allclose(pool.log_weights(t, 2), ref, rtol=1e-10, atol=1e-10)


def test_pool_cache_survives_window_shift(env):
    # incremental caching across iterations equals a cold computation
    pols = [_policy(env, [-0.5 + 0.1 * i, -0.1], 0.3) for i in range(4)]
    ds = Dataset(k_last=2)
    for i, pol in enumerate(pols):
        item = ds.add(sample_rollouts(env, pol, 5, seed=0, iteration=i), pol)
        item.state_dists = lqr.propagate(env, pol)[: env.spec.T]
        warm = ReusePool(ds)
    cold = ReusePool(_dataset(env, pols, 5, k_last=2))
    np.testing.assert_allclose(warm.log_mix, cold.log_mix, rtol=1e-12)
    np.testing.assert_allclose(warm.log_weights(3, 3), cold.log_weights(3, 3), rtol=1e-12)


def test_same_step_weights(env):
    pols = [_policy(env, [-0.5, -0.1], 0.3), _policy(env, [-0.8, 0.0], 0.2)]
    ds = _dataset(env, pols, 8)
    pool = ReusePool(ds)
    idx, logw = pool.log_weights_same_step(2, 1)
    assert np.all(pool.t[idx] == 2) and len(idx) == 16
    s, a = pool.s[idx], pool.a[idx]
    terms = np.stack([log_z(ds[j].state_dists[1], ds[j].policy[1], s, a) for j in (0, 1)])
    np.testing.assert_allclose(logw, terms[1] - logsumexp(terms, axis=0) + np.log(2), rtol=1e-10)


def test_mixture_state_fit_uses_discounted_weights(env):
    pols = [_policy(env, [-0.5, -0.1], 0.3), _policy(env, [-0.8, 0.0], 0.2)]
    ds = _dataset(env, pols, 30)
    got = fit_state_dist_mixture(ds, 3, 1, 0.5)
    x = np.concatenate([ds[0].batch.states[:, 2], ds[1].batch.states[:, 2]])
    w = np.concatenate([np.full(30, 0.5), np.ones(30)])
    ref = weighted_mle_gaussian(x, w)
    np.testing.assert_allclose(got.mean, ref.mean)
    np.testing.assert_allclose(got.cov, ref.cov)


def test_forward_estimate_tracks_true_marginals(env):
    pols = [_policy(env, [-0.5, -0.1], 0.3), _policy(env, [-0.6, -0.2], 0.3)]
    ds = _dataset(env, pols[:1], 4000)
    item = ds.add(sample_rollouts(env, pols[1], 4000, seed=0, iteration=1), pols[1])
    true = lqr.propagate(env, pols[1])
    dists = estimate_state_dists(ds, 1, ReuseConfig(method="forward"), true[0])
    item.state_dists = dists
    for t in range(1, env.spec.T):
        np.testing.assert_allclose(dists[t].mean, true[t].mean, atol=0.03)
        np.testing.assert_allclose(dists[t].cov, true[t].cov, atol=0.03)


def test_forward_falls_back_when_ess_is_low(env):
    pols = [_policy(env, [-0.5, -0.1], 0.3), _policy(env, [-0.5, -0.1], 0.3)]
    ds = _dataset(env, pols, 10)
    diag = {}
    fit_state_dist_forward(ds[1].state_dists[0], ds, 1, 1, 0.6, ess_floor=1e9, diagnostics=diag)
    assert diag["fallback"]
    fit_state_dist_forward(ds[1].state_dists[0], ds, 1, 1, 0.6, ess_floor=1.0, diagnostics=diag)
    assert not diag["fallback"] and diag["ess"] > 1.0


def _gauss_kernel_mean(dist: GaussianDist) -> float:
    """Closed-form ``E[exp(-|x|^2 / 2)]`` under ``dist``."""
    m = np.eye(dist.dim) + dist.cov
    return float(np.exp(-0.5 * dist.mean @ np.linalg.solve(m, dist.mean)) / np.sqrt(np.linalg.det(m)))


def _random_history(rng, d_s, d_a, T):
    rho = [GaussianDist(rng.normal(0, 0.5, d_s), (0.5 + rng.uniform(0, 0.5)) * np.eye(d_s))
           for _ in range(T)]
    pol = [LinGaussPolicy(rng.normal(0, 0.3, (d_a, d_s)), rng.normal(0, 0.5, d_a),
                          rng.uniform(0.4, 0.8) * np.eye(d_a)) for _ in range(T)]
    return rho, pol


class TestListedCases:
    def test_ess_of_two_one_one(self):
        assert effective_sample_size(np.array([2.0, 1.0, 1.0])) == pytest.approx(16 / 6, rel=1e-15)

    def test_mixture_with_unit_gamma_and_one_iteration_is_plain_mle(self, env):
        ds = _dataset(env, [_policy(env, [-0.5, -0.1], 0.3)], 25)
        got = fit_state_dist_mixture(ds, 2, 0, 1.0)
        ref = weighted_mle_gaussian(ds[0].batch.states[:, 1])
        np.testing.assert_allclose(got.mean, ref.mean, rtol=1e-14)
        np.testing.assert_allclose(got.cov, ref.cov, rtol=1e-14)

    def test_mixture_with_vanishing_gamma_uses_latest_iteration(self, env):
        pols = [_policy(env, [-0.5, -0.1], 0.3), _policy(env, [-0.8, 0.0], 0.2)]
        ds = _dataset(env, pols, 25)
        got = fit_state_dist_mixture(ds, 3, 1, 1e-12)
        ref = weighted_mle_gaussian(ds[1].batch.states[:, 2])
        np.testing.assert_allclose(got.mean, ref.mean, rtol=1e-9, atol=1e-11)
        np.testing.assert_allclose(got.cov, ref.cov, rtol=1e-9, atol=1e-11)

    def test_forward_single_iteration_is_unweighted_next_state_mle(self, env):
        ds = _dataset(env, [_policy(env, [-0.5, -0.1], 0.3)], 25)
        got = fit_state_dist_forward(ds[0].state_dists[1], ds, 2, 0, 0.6)
        ref = weighted_mle_gaussian(ds[0].batch.states[:, 2])
        np.testing.assert_allclose(got.mean, ref.mean, rtol=1e-12)
        np.testing.assert_allclose(got.cov, ref.cov, rtol=1e-12)

    def test_forward_fallback_fires_for_shifted_policies(self, env):
        # the current iteration sits far from where earlier samples were drawn
        pols = [_policy(env, [-0.5, -0.1], 0.05), _policy(env, [-0.5, -0.1], 0.05)]
        ds = _dataset(env, pols, 40)
        shifted = GaussianDist(ds[1].state_dists[1].mean + 3.0, 0.01 * np.eye(2))
        diag = {}
        fit_state_dist_forward(shifted, ds, 2, 1, 0.6, ess_floor=ReuseConfig().ess_floor, diagnostics=diag)
        assert diag["fallback"] and diag["ess"] < ReuseConfig().ess_floor

    def test_single_step_weight_is_one(self):
        rng = np.random.default_rng(0)
        rho, pol = _random_history(rng, 2, 1, 1)
        s, a = rng.standard_normal((9, 2)), rng.standard_normal((9, 1))
        np.testing.assert_allclose(iw_timestep(s, a, 1, rho, pol), 1.0, rtol=1e-14)

    def test_identical_steps_give_unit_weight(self):
        rng = np.random.default_rng(1)
        rho, pol = _random_history(rng, 2, 1, 1)
        s, a = rng.standard_normal((9, 2)), rng.standard_normal((9, 1))
        np.testing.assert_allclose(iw_timestep(s, a, 3, rho * 4, pol * 4), 1.0, rtol=1e-13)

    def test_two_step_ratio_by_hand(self):
        rng = np.random.default_rng(2)
        rho, pol = _random_history(rng, 1, 1, 2)
        s, a = np.array([[0.3]]), np.array([[-0.4]])

        def z(t):
            p = pol[t]
            return (mvn.pdf(s[0], rho[t].mean, rho[t].cov)
                    * mvn.pdf(a[0], p.gain @ s[0] + p.bias, p.cov))
        ref = z(1) / (0.5 * (z(0) + z(1)))
        assert iw_timestep(s, a, 2, rho, pol)[0] == pytest.approx(ref, rel=1e-12)

    def test_full_weight_with_repeated_history_is_timestep_weight(self):
        rng = np.random.default_rng(3)
        rho, pol = _random_history(rng, 2, 1, 3)
        s, a = rng.standard_normal((9, 2)), rng.standard_normal((9, 1))
        hist = {j: (rho, pol) for j in range(3)}
        np.testing.assert_allclose(iw_full(s, a, 2, 2, hist), iw_timestep(s, a, 2, rho, pol), rtol=1e-12)

    def test_two_by_two_brute_force(self):
        rng = np.random.default_rng(4)
        hist = {j: _random_history(rng, 2, 1, 2) for j in (0, 1)}
        s, a = rng.standard_normal((5, 2)), rng.standard_normal((5, 1))

        def z(j, t, k):
            r, p = hist[j][0][t], hist[j][1][t]
            return mvn.pdf(s[k], r.mean, r.cov) * mvn.pdf(a[k], p.gain @ s[k] + p.bias, p.cov)
        for k in range(5):
            ref = z(1, 0, k) / (0.25 * sum(z(j, t, k) for j in (0, 1) for t in (0, 1)))
            assert iw_full(s[k], a[k], 1, 1, hist)[0] == pytest.approx(ref, rel=1e-12)

    @pytest.mark.parametrize("n_iter, T, d_s, d_a", [(1, 2, 1, 1), (2, 2, 2, 1), (3, 3, 2, 2)])
    def test_self_normalized_mean_converges(self, n_iter, T, d_s, d_a):
        rng = np.random.default_rng(n_iter)
        hist = {j: _random_history(rng, d_s, d_a, T) for j in range(n_iter)}
        joints = [joint_state_action(r, p) for rho, pol in hist.values() for r, p in zip(rho, pol)]
        per = 40_000
        x = np.concatenate([g.sample(rng, per) for g in joints])
        t, i = T, n_iter - 1
        w = iw_full(x[:, :d_s], x[:, d_s:], t, i, hist)
        w = w / w.sum()
        f = np.exp(-0.5 * np.sum(x ** 2, axis=1))
        est = float(w @ f)
        se = float(np.sqrt(np.sum(w ** 2 * (f - est) ** 2)))
        target = _gauss_kernel_mean(joint_state_action(hist[i][0][t - 1], hist[i][1][t - 1]))
        assert abs(est - target) <= 3 * se
