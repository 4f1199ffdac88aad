import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbdlas.models import AlgebraicToyModel, Observation, misfit
from sbdlas.sampler import (
    ChainConfig,
    ChainInitError,
    GaussianState,
    InsufficientDataError,
    gaussian_moments,
    pcn_accept,
    pcn_propose,
    run_chain,
)


def std_normal(p):
    return GaussianState(np.zeros(p), np.eye(p))


class TestPropose:
    def test_hand_evaluated_example(self):
        out = pcn_propose([2.0], std_normal(1), 0.6, xi=[0.5])
        assert out[0] == pytest.approx(1.9, abs=1e-15)

    def test_beta_one_ignores_current_state(self):
        prior = GaussianState([1.0, -1.0], [[2.0, 0.3], [0.3, 1.0]])
        xi = np.array([0.4, -0.9])
        a = pcn_propose([100.0, 5.0], prior, 1.0, xi=xi)
        b = pcn_propose([-3.0, 0.0], prior, 1.0, xi=xi)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_beta_one_draws_from_prior(self):
        prior = GaussianState([1.0, -1.0], [[2.0, 0.3], [0.3, 1.0]])
        rng = np.random.default_rng(0)
        draws = np.array([pcn_propose([5.0, 5.0], prior, 1.0, rng) for _ in range(20000)])
        np.testing.assert_allclose(draws.mean(axis=0), prior.mean, atol=0.05)
        np.testing.assert_allclose(np.cov(draws.T), prior.cov, atol=0.08)

    @given(st.floats(-5, 5), st.floats(-3, 3))
    def test_small_beta_stays_close(self, theta, xi):
        prior = std_normal(1)
        out = pcn_propose([theta], prior, 1e-8, xi=[xi])
        assert abs(out[0] - theta) < 1e-6

    @pytest.mark.parametrize("beta", [0.0, -0.1, 1.5])
    def test_beta_out_of_range(self, beta):
        with pytest.raises(ValueError):
            pcn_propose([0.0], std_normal(1), beta, xi=[0.0])


class TestAccept:
    def test_downhill_and_flat_always_accept(self):
        rng = np.random.default_rng(0)
        assert all(pcn_accept(3.0, 1.0, rng) for _ in range(1000))
        assert all(pcn_accept(2.0, 2.0, rng) for _ in range(1000))

    def test_ln2_uphill_accepts_half_the_time(self):
        rng = np.random.default_rng(1)
        n = 100_000
        hits = sum(pcn_accept(0.0, math.log(2.0), rng) for _ in range(n))
        assert abs(hits / n - 0.5) < 0.01

    def test_consumes_one_uniform_either_way(self):
        a, b = np.random.default_rng(7), np.random.default_rng(7)
        pcn_accept(0.0, -1.0, a)
        pcn_accept(0.0, 50.0, b)
        assert a.random() == b.random()


class TestRunChain:
    def test_zero_potential_preserves_prior(self):
        prior = GaussianState([1.0, -2.0, 0.5], np.diag([1.0, 4.0, 0.25]))
        cfg = ChainConfig(steps=20000, beta=0.5, seed=3)
        res = run_chain(lambda t: 0.0, prior, cfg)
        assert res.acceptance_rate == 1.0
        se = np.sqrt(np.diag(prior.cov) / res.samples.shape[0])
        assert np.all(np.abs(res.mean - prior.mean) < 4 * se)

    def test_kept_sample_count(self):
        cfg = ChainConfig(steps=1234, burn_in=0.2, thin=10)
        res = run_chain(lambda t: 0.0, std_normal(2), cfg)
        assert res.samples.shape == ((1234 - 246) // 10, 2)
        assert res.potentials.shape == (1234,)

    def test_drifts_toward_high_likelihood(self):
        model = AlgebraicToyModel()
        obs = Observation(np.array([11.25, -1.25]), 0.0)
        cfg = ChainConfig(steps=3000, beta=0.05, burn_in=0.0, thin=1, seed=0)
        res = run_chain(lambda t: misfit(model(t), obs), GaussianState(np.zeros(2), 4 * np.eye(2)), cfg)
        start = misfit(model(np.zeros(2)), obs)
        assert res.potentials[:100].mean() > res.potentials[-500:].mean()
        assert res.potentials[-500:].mean() < 0.1 * start
        assert np.all(res.mean > 1.0)

    def test_same_seed_identical(self):
        prior = std_normal(3)
        cfg = ChainConfig(steps=500, beta=0.3, seed=9)
        phi = lambda t: float(np.sum((t - 1) ** 2))
        assert run_chain(phi, prior, cfg) == run_chain(phi, prior, cfg)
        assert run_chain(phi, prior, cfg) != run_chain(phi, prior, cfg.replace(seed=10))

    def test_infinite_proposals_are_rejected(self):
        phi = lambda t: 0.0 if t[0] < 0.5 else math.inf
        res = run_chain(phi, std_normal(1), ChainConfig(steps=2000, beta=0.5, seed=1))
        assert np.all(res.samples[:, 0] < 0.5)
        assert 0 < res.acceptance_rate < 1

    def test_infinite_start_raises(self):
        with pytest.raises(ChainInitError):
            run_chain(lambda t: math.inf, std_normal(1), ChainConfig(steps=10))

    def test_wrong_start_shape(self):
        with pytest.raises(ChainInitError):
            run_chain(lambda t: 0.0, std_normal(2), ChainConfig(steps=10, theta0=np.zeros(3)))

    def test_trace_csv(self, tmp_path):
        res = run_chain(lambda t: float(t @ t), std_normal(2), ChainConfig(steps=50, seed=2))
        path = tmp_path / "trace.csv"
        res.write_trace(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,phi,accepted"
        assert len(lines) == 51
        assert float(lines[-1].split(",")[1]) == res.potentials[-1]

    @pytest.mark.parametrize("kw", [{"beta": 0.0}, {"burn_in": 1.0}, {"steps": 0}, {"thin": 0}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            ChainConfig(**kw)


class TestGaussianMoments:
    def test_two_samples(self):
        state = gaussian_moments([[0.0, 0.0], [2.0, 2.0]], add_jitter=False)
        np.testing.assert_array_equal(state.mean, [1.0, 1.0])
        np.testing.assert_array_equal(state.cov, [[2.0, 2.0], [2.0, 2.0]])

    def test_identical_samples_get_jitter_only(self):
        state = gaussian_moments(np.ones((10, 3)), jitter=1e-6)
        np.testing.assert_array_equal(state.cov, 1e-6 * np.eye(3))
        np.linalg.cholesky(state.cov)

    def test_large_sample_recovers_moments(self):
        mu = np.array([1.0, -2.0])
        cov = np.array([[1.0, 0.6], [0.6, 2.0]])
        x = np.random.default_rng(0).multivariate_normal(mu, cov, size=10_000)
        state = gaussian_moments(x)
        np.testing.assert_allclose(state.mean, mu, atol=0.05)
        np.testing.assert_allclose(state.cov, cov, atol=0.08)

    def test_single_sample(self):
        with pytest.raises(InsufficientDataError):
            gaussian_moments([[1.0, 2.0]])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 40), st.integers(1, 5), st.integers(0, 1000))
    def test_matches_numpy(self, n, p, seed):
        x = np.random.default_rng(seed).normal(size=(n, p))
        state = gaussian_moments(x, add_jitter=False)
        np.testing.assert_allclose(state.mean, x.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(state.cov, np.atleast_2d(np.cov(x, rowvar=False)), atol=1e-12)

    def test_state_round_trip(self):
        s = GaussianState([1.0, 2.0], [[1.0, 0.1], [0.1, 3.0]])
        t = GaussianState.from_dict(s.to_dict())
        np.testing.assert_array_equal(t.mean, s.mean)
        np.testing.assert_array_equal(t.cov, s.cov)

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ValueError):
            GaussianState([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
