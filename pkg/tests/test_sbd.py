import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sbdlas.models import AlgebraicToyModel, FunctionModel, Observation, ZeroModel, misfit
from sbdlas.sampler import ChainConfig, GaussianState
from sbdlas.sbd import (
    SBDConfig,
    SBDError,
    estimation_error,
    initial_prior,
    load_checkpoint,
    one_step_ahead,
    run_sbd_las,
)
from sbdlas.surrogate import NetConfig

Y_TOY = np.array([11.25, -1.25])
STD_PRIOR = GaussianState(np.zeros(2), np.eye(2))


def toy_posterior_mean():
    """Posterior mean of the noise-free toy under N(0, I) by grid quadrature."""
    g = np.linspace(-4, 7, 1101)
    t1, t2 = np.meshgrid(g, g)
    r1 = Y_TOY[0] - (t1 + t2 + t1 * t2)
    r2 = Y_TOY[1] - (t1 + t2 - t1 * t2)
    logw = -0.5 * (r1**2 + r2**2) - 0.5 * (t1**2 + t2**2)
    w = np.exp(logw - logw.max())
    return np.array([np.sum(w * t1), np.sum(w * t2)]) / w.sum()


def quick_config(**kw):
    base = dict(
        iterations=3,
        points=20,
        chain=ChainConfig(steps=200, beta=0.5),
        initial_chain=ChainConfig(steps=200, beta=0.5),
        seed=0,
    )
    base.update(kw)
    return SBDConfig(**base)


QUICK_NET = NetConfig(2, 2, (8,), "tanh", learning_rate=1e-2, epochs=5, batch_size=20)


class TestEstimationError:
    def test_exact(self):
        assert estimation_error([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_unit_offsets(self):
        assert estimation_error([1.0, 1.0], [0.0, 0.0]) == 1.0

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(-5, 5))
    def test_quadratic_homogeneity(self, a, c):
        a = np.array(a)
        b = np.array([0.5, -1.0, 2.0])
        assert estimation_error(c * a, c * b) == pytest.approx(c**2 * estimation_error(a, b), rel=1e-9, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            estimation_error([1.0], [1.0, 2.0])


class TestOneStepAhead:
    cov = np.array([[2.0, 0.1], [0.1, 1.0]])

    def history(self, means):
        return [GaussianState(np.atleast_1d(m), np.eye(np.size(m))) for m in means]

    def test_alpha_one_extrapolates(self):
        out = one_step_ahead(self.history([0.0, 1.0]), 1.0)
        assert out.mean[0] == 2.0

    def test_alpha_half(self):
        hist = [GaussianState([0.0, 0.0], np.eye(2)), GaussianState([1.0, 1.0], self.cov)]
        out = one_step_ahead(hist, 0.5)
        np.testing.assert_array_equal(out.mean, [1.5, 1.5])
        assert out.cov is hist[-1].cov

    def test_alpha_zero_returns_latest(self):
        hist = self.history([0.0, 3.0, 4.0])
        assert one_step_ahead(hist, 0.0) is hist[-1]

    def test_single_entry(self):
        hist = self.history([7.0])
        assert one_step_ahead(hist, 1.0) is hist[0]

    def test_empty_history(self):
        with pytest.raises(ValueError):
            one_step_ahead([], 0.5)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            one_step_ahead(self.history([0.0, 1.0]), -0.1)


class TestInitialPrior:
    def test_toy_as_own_coarse(self):
        obs = Observation(Y_TOY, 0.0)
        state = initial_prior(AlgebraicToyModel(), obs, ChainConfig(steps=50000, beta=0.2, seed=1), STD_PRIOR)
        assert np.max(np.abs(state.mean - 2.5)) < 0.5

    def test_matches_quadrature_posterior(self):
        obs = Observation(Y_TOY, 0.0)
        state = initial_prior(AlgebraicToyModel(), obs, ChainConfig(steps=50000, beta=0.2, seed=2), STD_PRIOR)
        np.testing.assert_allclose(state.mean, toy_posterior_mean(), atol=0.15)

    def test_uninformative_likelihood_returns_prior(self):
        obs = Observation(Y_TOY, 1e6)
        prior = GaussianState([0.5, -0.5], np.eye(2))
        state = initial_prior(AlgebraicToyModel(), obs, ChainConfig(steps=20000, beta=0.9, seed=3), prior)
        np.testing.assert_allclose(state.mean, prior.mean, atol=0.1)
        np.testing.assert_allclose(state.cov, prior.cov, atol=0.15)


class TestRunSBD:
    def test_fine_call_accounting(self):
        fine = AlgebraicToyModel()
        obs = Observation(Y_TOY, 0.0)
        cfg = quick_config(iterations=10, points=500, chain=ChainConfig(steps=50, beta=0.5))
        res = run_sbd_las(fine, ZeroModel(2, 2), obs, STD_PRIOR, cfg, QUICK_NET)
        assert res.fine_calls == fine.calls == 5000
        assert [r.fine_calls for r in res.records] == [500 * (k + 1) for k in range(10)]

    def test_trace_and_history_lengths(self):
        res = run_sbd_las(
            AlgebraicToyModel(), ZeroModel(2, 2), Observation(Y_TOY, 0.0), STD_PRIOR, quick_config(), QUICK_NET,
            theta_star=np.array([2.5, 2.5]),
        )
        assert len(res.errors) == 4
        assert len(res.history) == 3
        assert res.errors[1:] == [r.error for r in res.records]
        assert res.final_error == estimation_error(res.theta_hat, [2.5, 2.5])

    def test_without_truth_no_errors(self):
        res = run_sbd_las(AlgebraicToyModel(), ZeroModel(2, 2), Observation(Y_TOY, 0.0), STD_PRIOR, quick_config(), QUICK_NET)
        assert res.errors == []
        assert res.final_error is None

    def test_deterministic(self):
        def go():
            return run_sbd_las(
                AlgebraicToyModel(), ZeroModel(2, 2), Observation(Y_TOY, 0.0), STD_PRIOR, quick_config(alpha=0.5), QUICK_NET,
                theta_star=np.array([2.5, 2.5]),
            )

        a, b = go(), go()
        assert a.errors == b.errors
        np.testing.assert_array_equal(a.theta_hat, b.theta_hat)

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        args = (AlgebraicToyModel(), ZeroModel(2, 2), Observation(Y_TOY, 0.0), STD_PRIOR, quick_config(), QUICK_NET)
        full = run_sbd_las(*args, theta_star=np.array([2.5, 2.5]), checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.glob("state_*.json")) == ["state_000.json", "state_001.json", "state_002.json"]

        fine = AlgebraicToyModel()
        resumed = run_sbd_las(
            fine, ZeroModel(2, 2), Observation(Y_TOY, 0.0), STD_PRIOR, quick_config(), QUICK_NET,
            theta_star=np.array([2.5, 2.5]), resume_from=tmp_path / "state_000.json",
        )
        assert fine.calls == 40
        assert resumed.fine_calls == full.fine_calls == 60
        assert resumed.errors == full.errors
        np.testing.assert_array_equal(resumed.theta_hat, full.theta_hat)

    def test_checkpoint_contents(self, tmp_path):
        run_sbd_las(
            AlgebraicToyModel(), ZeroModel(2, 2), Observation(Y_TOY, 0.0), STD_PRIOR, quick_config(iterations=2), QUICK_NET,
            checkpoint_dir=tmp_path,
        )
        ck = load_checkpoint(tmp_path, ZeroModel(2, 2))
        assert ck.iteration == 1
        assert len(ck.history) == 2
        assert ck.fine_calls == 40

    def test_training_failure_is_tagged(self):
        def broken(theta):
            raise RuntimeError("solver crashed")

        fine = FunctionModel(broken, 2, 2)
        with pytest.raises(SBDError) as info:
            run_sbd_las(fine, ZeroModel(2, 2), Observation(Y_TOY, 0.0), STD_PRIOR, quick_config(), QUICK_NET,
                        initial_state=STD_PRIOR)
        assert info.value.iteration == 0
        assert info.value.phase == "surrogate training"
        assert info.value.partial is not None

    def test_jitter_added_to_initial_prior(self):
        # a degenerate initial state still yields a usable chain prior
        init = GaussianState([2.0, 2.0], np.zeros((2, 2)))
        res = run_sbd_las(
            AlgebraicToyModel(), ZeroModel(2, 2), Observation(Y_TOY, 0.0), STD_PRIOR, quick_config(jitter=0.01), QUICK_NET,
            initial_state=init,
        )
        assert res.theta_hat.shape == (2,)

    def test_converges_on_toy(self):
        """Median over seeds of the final estimate lies within 0.1 of (2.5, 2.5)."""
        cfg_kw = dict(
            iterations=30, points=50, alpha=0.0,
            chain=ChainConfig(steps=5000, beta=0.5), initial_chain=ChainConfig(steps=5000, beta=0.5),
            final_chain=ChainConfig(steps=50000, beta=0.2), jitter=0.02,
        )
        net = NetConfig(2, 2, (40, 40), "sigmoid", learning_rate=1e-2, epochs=300, batch_size=50)
        init = GaussianState([0.0, 0.5], 0.04 * np.eye(2))
        hats = []
        for seed in range(1, 4):
            res = run_sbd_las(
                AlgebraicToyModel(), ZeroModel(2, 2), Observation(Y_TOY, 0.0), STD_PRIOR, SBDConfig(seed=seed, **cfg_kw), net,
                theta_star=np.array([2.5, 2.5]), initial_state=init,
            )
            hats.append(res.theta_hat)
            assert misfit(AlgebraicToyModel()(res.theta_hat), Observation(Y_TOY, 0.0)) < 1.0
        assert np.max(np.abs(np.median(hats, axis=0) - 2.5)) < 0.1
