from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from disagg.errors import ValidationError
from disagg.laplace import (
    OUTER_GTOL,
    FitResult,
    LaplaceProblem,
    fd_gradient,
    fit,
    floored_inverse,
    inner_optimize,
    laplace_objective,
    summarize_fit,
)
from disagg.model import DisaggModel, ModelSpec, pc_iid_nll
from disagg.prepare import prepare_data
from disagg.simulate import SimulationConfig, simulate_dataset

from conftest import small_prep
from oracles import conjugate_regression, linear_gaussian_marginal


@pytest.fixture(scope="module")
def sim_fit():
    sim = simulate_dataset(SimulationConfig(grid_ncols=14, grid_nrows=14, n_polygons=10, seed=11))
    prep = prepare_data(sim.polygons, sim.stack, sim.aggregation, spacing=2.0, pad_nodes=2)
    return prep, fit(prep, ModelSpec())


class TestInner:
    def test_no_latent(self, prep_small):
        res = inner_optimize([0.1, 0.2], prep_small, ModelSpec(use_field=False, use_iid=False))
        assert res.latent.size == 0 and res.iterations == 0

    def test_linear_gaussian_one_step(self):
        prep = small_prep(seed=2, responses=[1.0, 3.0, 2.0])
        prep.pixel_table.aggregation[:] = 1.0
        spec = ModelSpec(family="gaussian")
        model = DisaggModel(prep, spec)
        theta = model.theta0()
        hs = model.hyper_state(theta)
        # dense oracle: H x = -g(0) for the quadratic objective
        _, g0, H = model.evaluate(hs, np.zeros(model.layout.n_latent), order=2)
        exact = np.linalg.solve(H.toarray(), -g0)
        res = inner_optimize(theta, prep, spec)
        np.testing.assert_allclose(res.latent, exact, atol=1e-10)
        _, g1, _ = model.evaluate(hs, exact, order=1)
        assert np.max(np.abs(g1)) < 1e-8

    def test_poisson_mode_matches_gradient_descent(self):
        prep = small_prep(seed=4)
        spec = ModelSpec()
        model = DisaggModel(prep, spec)
        theta = model.theta0()
        hs = model.hyper_state(theta)
        res = inner_optimize(theta, prep, spec)
        x = np.zeros(model.layout.n_latent)
        _, _, H = model.evaluate(hs, res.latent, order=2)
        lam = np.linalg.eigvalsh(H.toarray())
        step = 1.0 / (1.5 * lam.max())
        for _ in range(10_000):
            x = x - step * model.evaluate(hs, x, order=1)[1]
        np.testing.assert_allclose(res.latent, x, atol=1e-6)

    def test_warm_start_invariance(self, sim_fit):
        prep, result = sim_fit
        problem = LaplaceProblem(prep, result.spec)
        theta = result.theta_hat
        v0, _ = problem.evaluate(theta, np.zeros_like(result.latent_mode))
        v1, _ = problem.evaluate(theta, result.latent_mode + 0.3)
        assert abs(v0 - v1) < 1e-8


class TestObjective:
    def test_no_latent_equals_joint(self, prep_small):
        spec = ModelSpec(use_field=False, use_iid=False)
        model = DisaggModel(prep_small, spec)
        theta = np.array([0.2, -0.1])
        assert laplace_objective(theta, prep_small, spec) == model.evaluate(model.hyper_state(theta), np.empty(0))[0]

    @pytest.mark.parametrize("seed", range(3))
    def test_linear_gaussian_exact(self, seed):
        prep = small_prep(seed=seed, responses=np.random.default_rng(seed).normal(4, 1, 3))
        spec = ModelSpec(family="gaussian")
        model = DisaggModel(prep, spec)
        rng = np.random.default_rng(seed)
        theta = model.theta0() + rng.normal(0, 0.3, model.layout.n_theta)
        assert laplace_objective(theta, prep, spec) == pytest.approx(linear_gaussian_marginal(model, theta), abs=1e-6)

    def test_infinite_precision_limit(self):
        prep = small_prep(seed=3)
        with_iid = ModelSpec()
        without = ModelSpec(use_iid=False)
        m = DisaggModel(prep, with_iid)
        theta = m.theta0()
        theta[m.layout.position["iideffect_log_tau"]] = 20.0
        reduced = np.delete(theta, m.layout.position["iideffect_log_tau"])
        lhs = laplace_objective(theta, prep, with_iid) - pc_iid_nll(20.0, with_iid.priors)
        assert lhs == pytest.approx(laplace_objective(reduced, prep, without), abs=1e-6)


class TestFit:
    def test_recovers_truth_loosely(self, sim_fit):
        _, result = sim_fit
        assert result.converged
        truth = np.array([-2.0, 0.5, -0.3])
        assert np.all(np.abs(result.theta_hat[:3] - truth) <= 3 * result.std_errors[:3])

    def test_covariance_symmetric_psd(self, sim_fit):
        _, result = sim_fit
        C = result.theta_cov
        assert np.array_equal(C, C.T)
        assert np.all(np.diag(C) >= 0)
        assert np.linalg.eigvalsh(C).min() >= 0

    def test_gradient_small_at_optimum(self, sim_fit):
        prep, result = sim_fit
        problem = LaplaceProblem(prep, result.spec)
        free = list(range(len(result.theta_hat)))
        g = fd_gradient(problem, result.theta_hat, free, result.latent_mode)
        assert np.max(np.abs(g)) < 10 * OUTER_GTOL

    def test_single_iteration_warns(self):
        prep = small_prep(seed=1)
        with pytest.warns(RuntimeWarning, match="without converging"):
            result = fit(prep, ModelSpec(max_iterations=1))
        assert not result.converged and result.convergence["outer_iterations"] == 1

    def test_conjugate_regression(self):
        prep = small_prep(seed=6, n_cov=2, responses=[2.0, 5.0, 3.5])
        spec = ModelSpec(family="gaussian", use_field=False, use_iid=False, fixed={"log_tau_obs": 0.0})
        result = fit(prep, spec)
        t = prep.pixel_table
        J = np.zeros((prep.n_polygons, t.n_pixels))
        J[t.polygon_index, np.arange(t.n_pixels)] = t.aggregation
        D = J @ np.column_stack([np.ones(t.n_pixels), t.covariates])
        sd = np.sqrt(J ** 2 @ np.ones(t.n_pixels))
        pr = spec.priors
        mean, cov = conjugate_regression(D, prep.responses, sd, np.array([pr.priormean_intercept] + [pr.priormean_slope] * 2),
                                         np.array([pr.priorsd_intercept] + [pr.priorsd_slope] * 2))
        np.testing.assert_allclose(result.theta_hat[:3], mean, rtol=1e-5)
        np.testing.assert_allclose(result.theta_cov[:3, :3], cov, rtol=1e-5)
        assert result.theta_hat[3] == 0.0 and result.theta_cov[3, 3] == 0.0

    def test_fix_unknown(self, prep_small):
        with pytest.raises(ValidationError):
            fit(prep_small, ModelSpec(fixed={"nope": 1.0}))

    def test_floored_inverse(self):
        H = np.array([[2.0, 0.0], [0.0, -1.0]])
        C = floored_inverse(H)
        assert C[0, 0] == 0.5 and C[1, 1] == 1e10


class TestPersistence:
    def test_roundtrip(self, sim_fit, tmp_path):
        prep, result = sim_fit
        result.save(tmp_path)
        back = FitResult.load(tmp_path, prep)
        assert np.array_equal(back.theta_hat, result.theta_hat)
        assert np.array_equal(back.latent_mode, result.latent_mode)
        assert back.spec == result.spec
        raw = (tmp_path / "latent.bin").read_bytes()
        assert np.array_equal(np.frombuffer(raw, "<f8"), result.latent_mode)

    def test_provenance(self, sim_fit, tmp_path):
        _, result = sim_fit
        result.save(tmp_path)
        with pytest.raises(ValidationError, match="provenance"):
            FitResult.load(tmp_path, small_prep())

    def test_summary_layout(self, sim_fit):
        prep, result = sim_fit
        text = summarize_fit(result, prep)
        names = [line.split()[0] for line in text.splitlines()[2:2 + len(result.labels)]]
        assert names == ["intercept", "slope", "slope", "iideffect_log_tau", "log_sigma", "log_rho"]
        assert "Slopes are listed in covariate order: cov1, cov2" in text
        se = float(text.splitlines()[2].split()[2])
        assert se == pytest.approx(math.sqrt(result.theta_cov[0, 0]), abs=1e-7)
        assert "RMSE" in text and "log_pearson" in text
