import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from mirrorbridge.gmm import GmmPotential, condition, sample_conditional
from mirrorbridge.metrics import GaussianMoments, bw_uvp, cbw_uvp, eot_conditional
from mirrorbridge.solvers import (DivergenceError, FitConfig, discrete_sinkhorn, ema_update,
                                  fit_reverse_kl, init_potential, plan_from_duals, reverse_kl_loss,
                                  sinkhorn_col_update, sinkhorn_row_update)

from conftest import central_diff, random_potential, rel_err


class TestReverseKl:
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        theta = random_potential(rng, 2, 2, epsilon=0.7)
        X, Y = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
        _, grad = reverse_kl_loss(theta, X, Y)

        def loss(flat):
            return reverse_kl_loss(GmmPotential.from_flat(flat, 2, 2, 0.7), X, Y)[0]

        assert rel_err(grad, central_diff(loss, theta.to_flat(), step=1e-5)) < 1e-5

    def test_dimension_mismatch(self, rng):
        theta = random_potential(rng, 2, 2)
        with pytest.raises(ValueError, match="columns"):
            reverse_kl_loss(theta, np.zeros((4, 3)), np.zeros((4, 2)))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflow_reports_row(self):
        theta = GmmPotential(1e-3, [0.0], [[1.0]], [[[1.0]]])
        with pytest.raises(FloatingPointError, match="x_batch row 1"):
            reverse_kl_loss(theta, [[0.0], [1e160]], [[0.0], [1.0]])


class TestFit:
    def test_gaussian_pair_recovers_plan(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((4000, 1))
        Y = 1.0 + 1.5 * rng.standard_normal((4000, 1))
        cfg = FitConfig(n_components=1, epsilon=0.5, n_iters=5000, lr=0.02, momentum=0.9, optimizer="adam")
        theta = fit_reverse_kl(cfg, X, Y)
        ref = eot_conditional([0.0], [[1.0]], [1.0], [[2.25]], 0.5)
        assert cbw_uvp(theta, ref, np.linspace(-2, 2, 9)[:, None]) < 1.0

    def test_large_epsilon_gives_product_coupling(self):
        rng = np.random.default_rng(1)
        X, Y = rng.standard_normal((4000, 1)), rng.standard_normal((4000, 1))
        cfg = FitConfig(n_components=1, epsilon=10.0, n_iters=3000, lr=0.02, momentum=0.9, optimizer="adam")
        theta = fit_reverse_kl(cfg, X, Y)
        mean, cov = condition(theta, [0.0]).moments()
        assert cov[0, 0] == pytest.approx(1.0, abs=0.1)
        # the joint plan against the independent coupling of the two marginals
        xs = rng.standard_normal(20_000)
        ys = sample_conditional(theta, xs[:, None], 2)[:, 0]
        joint = np.column_stack([xs, ys])
        assert bw_uvp(joint, GaussianMoments(np.zeros(2), np.eye(2)), variance_norm=0.5) < 2.0

    def test_deterministic(self, rng):
        X, Y = rng.standard_normal((100, 2)), rng.standard_normal((100, 2)) + 1
        cfg = FitConfig(n_components=3, epsilon=0.5, n_iters=50, lr=0.01, momentum=0.5)
        a, b = fit_reverse_kl(cfg, X, Y), fit_reverse_kl(cfg, X, Y)
        assert a.to_flat().tobytes() == b.to_flat().tobytes()

    def test_divergence_reported(self, rng):
        X, Y = rng.standard_normal((100, 1)), rng.standard_normal((100, 1))
        cfg = FitConfig(n_components=2, epsilon=0.01, n_iters=200, lr=50.0)
        with pytest.raises(DivergenceError):
            fit_reverse_kl(cfg, X, Y)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="optimizer"):
            FitConfig(optimizer="lbfgs")
        with pytest.raises(ValueError, match="momentum"):
            FitConfig(momentum=1.0)

    def test_init_potential(self, rng):
        Y = rng.standard_normal((30, 2))
        theta = init_potential(4, Y, 0.1, 0, init_cov=2.0)
        assert all(any(np.array_equal(m, y) for y in Y) for m in theta.means)
        np.testing.assert_allclose(theta.covs, np.broadcast_to(2.0 * np.eye(2), (4, 2, 2)))
        np.testing.assert_allclose(theta.weights, 0.25)


class TestEma:
    def test_zero_decay_returns_target(self, rng):
        ema, phi = random_potential(rng, 2, 2), random_potential(rng, 2, 2)
        assert ema_update(ema, phi, 0.0) is phi

    def test_equal_inputs_unchanged(self, rng):
        phi = random_potential(rng, 2, 2)
        out = ema_update(phi, phi, 0.9)
        np.testing.assert_allclose(out.to_flat(), phi.to_flat(), rtol=1e-15)

    def test_geometric_arithmetic(self):
        ema = GmmPotential(1.0, [0.0], [[0.0]], [[[1.0]]])
        for _ in range(3):
            ema = ema_update(ema, GmmPotential(1.0, [0.0], [[1.0]], [[[1.0]]]), 0.99)
        assert ema.means[0, 0] == pytest.approx(1 - 0.99 ** 3, abs=1e-15)
        assert ema.means[0, 0] == pytest.approx(0.029701, abs=1e-15)

    def test_bad_decay(self, rng):
        phi = random_potential(rng, 1, 1)
        with pytest.raises(ValueError):
            ema_update(phi, phi, 1.0)


class TestSinkhorn:
    def test_zero_cost_is_product(self, rng):
        a, b = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(3))
        plan = discrete_sinkhorn(a, b, np.zeros((4, 3)), 0.7, max_iters=1)
        np.testing.assert_allclose(plan.weights, np.outer(a, b), rtol=1e-14)
        assert plan.converged

    def test_two_by_two_brute_force(self):
        eps = 1.0
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        plan = discrete_sinkhorn([0.5, 0.5], [0.5, 0.5], cost, eps)

        def objective(p):
            P = np.array([[p, 0.5 - p], [0.5 - p, p]])
            return np.sum(P * cost) + eps * np.sum(P * np.log(P))

        grid = np.linspace(1e-9, 0.5 - 1e-9, 1_000_001)
        p0 = grid[np.argmin([objective(p) for p in grid[::1000]]) * 1000]
        best = minimize_scalar(objective, bounds=(p0 - 1e-3, p0 + 1e-3), method="bounded",
                               options={"xatol": 1e-13})
        p = best.x
        np.testing.assert_allclose(plan.weights, [[p, 0.5 - p], [0.5 - p, p]], atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(2, 12), m=st.integers(2, 12),
           eps=st.floats(0.05, 5.0))
    def test_half_steps_are_exact(self, seed, n, m, eps):
        rng = np.random.default_rng(seed)
        a, b = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
        log_kernel = -rng.uniform(0, 3, (n, m)) / eps
        f = rng.standard_normal(n)
        g = sinkhorn_col_update(f, np.log(b), log_kernel)
        assert 0.5 * np.abs(plan_from_duals(f, g, log_kernel).sum(axis=0) - b).sum() <= 1e-12
        f = sinkhorn_row_update(g, np.log(a), log_kernel)
        assert 0.5 * np.abs(plan_from_duals(f, g, log_kernel).sum(axis=1) - a).sum() <= 1e-12

    def test_non_convergence_flagged(self, rng):
        a = b = np.full(30, 1 / 30)
        x = np.sort(rng.standard_normal(30))
        plan = discrete_sinkhorn(a, b, 0.5 * (x[:, None] - x[None, :]) ** 2, 1e-3, max_iters=2)
        assert not plan.converged and plan.n_iters == 2 and plan.marginal_error > 1e-10

    def test_invalid_marginals(self):
        with pytest.raises(ValueError, match="sum to 1"):
            discrete_sinkhorn([0.5, 0.6], [0.5, 0.5], np.zeros((2, 2)), 1.0)

    def test_csv_export(self, tmp_path):
        plan = discrete_sinkhorn([0.5, 0.5], [1.0], np.zeros((2, 1)), 1.0)
        plan.to_csv(tmp_path / "plan.csv")
        lines = (tmp_path / "plan.csv").read_text().splitlines()
        assert lines == ["x_index,y_index,weight", "0,0,0.5", "1,0,0.5"]
