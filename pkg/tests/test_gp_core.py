import math
import warnings

import numpy as np
import pytest

from conftest import dense_iff_objective, dense_log_marginal, dense_sgpr_objective, random_problem
from iffgp import gp_core
from iffgp.errors import InvalidArgumentError, NegativeTraceWarning, NumericalFailure
from iffgp.features import build_grid, default_epsilon, feature_matrix, kuu_diag
from iffgp.kernels import Kernel, SpectralDensity, density_for
from iffgp.precompute import DataSummary, compute_summaries, summaries_from_features

LOG2PI = math.log(2 * math.pi)


class TestCholesky:
    def test_escalates_jitter(self):
        A = np.ones((3, 3))
        L = gp_core.cholesky(A)
        assert np.all(np.isfinite(L))

    def test_gives_up(self):
        with pytest.raises(NumericalFailure):
            gp_core.cholesky(-np.eye(2))


class TestExact:
    def test_single_zero(self):
        v = gp_core.exact_log_marginal(np.zeros((1, 1)), np.array([0.0]), Kernel("se", (1.0,)), 1.0)
        assert v == pytest.approx(-0.5 * math.log(2) - 0.5 * LOG2PI, abs=1e-12)
        assert v == pytest.approx(-1.26551, abs=1e-5)

    def test_single_two(self):
        v = gp_core.exact_log_marginal(np.zeros((1, 1)), np.array([2.0]), Kernel("se", (1.0,)), 1.0)
        assert v == pytest.approx(-2.26551, abs=1e-5)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_dense(self, seed):
        rng = np.random.default_rng(seed)
        X, y, k, noise = random_problem(rng, 3)
        assert gp_core.exact_log_marginal(X, y, k, noise) == pytest.approx(dense_log_marginal(X, y, k, noise), abs=1e-10)

    def test_dense_limit(self):
        with pytest.raises(InvalidArgumentError):
            gp_core.exact_log_marginal(np.zeros((10, 1)), np.zeros(10), Kernel("se", (1.0,)), 1.0, dense_limit=5)

    def test_bad_noise(self):
        with pytest.raises(InvalidArgumentError):
            gp_core.exact_log_marginal(np.zeros((1, 1)), np.zeros(1), Kernel("se", (1.0,)), 0.0)

    def test_predict_far_point_is_prior(self):
        k = Kernel("se", (0.1,), 2.0)
        p = gp_core.exact_predict(np.zeros((3, 1)) + [[0.0], [0.1], [0.2]], np.ones(3), k, 0.5, np.array([[1e3]]))
        assert p.mean[0] == 0.0 and p.variance[0] == pytest.approx(2.0)

    def test_predict_interpolates(self):
        X = np.array([[0.0], [1.0], [2.5]])
        y = np.array([0.3, -1.0, 2.0])
        p = gp_core.exact_predict(X, y, Kernel("se", (1.0,)), 1e-8, X[:1])
        assert p.mean[0] == pytest.approx(0.3, abs=1e-3)

    def test_predict_matches_dense(self, rng):
        X, y, k, noise = random_problem(rng, 5)
        Xs = rng.uniform(-5, 5, (4, 1))
        K = k.gram(X) + noise * np.eye(5)
        Ks = k.gram(Xs, X)
        mean = Ks @ np.linalg.solve(K, y)
        cov = k.gram(Xs) - Ks @ np.linalg.solve(K, Ks.T)
        p = gp_core.exact_predict(X, y, k, noise, Xs)
        np.testing.assert_allclose(p.mean, mean, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(p.variance, np.diag(cov), rtol=1e-8, atol=1e-12)


class TestCollapsedObjective:
    def test_no_features(self):
        s = DataSummary(0.0, np.zeros(0), np.zeros((0, 0)), 1)
        v = gp_core.collapsed_objective(s, np.zeros(0), 1.0, 1.0)
        assert v.total == pytest.approx(-0.5 * LOG2PI - 0.5, abs=1e-12)
        assert v.total == pytest.approx(-1.41894, abs=1e-5)

    def test_parts_sum(self, rng):
        X, y, k, noise = random_problem(rng, 30)
        g = build_grid(16, default_epsilon(X))
        v = gp_core.iff_objective(compute_summaries(X, y, g), g, k, noise, density_for(k))
        assert v.total == pytest.approx(v.log_det + v.quad + v.trace + v.const, rel=1e-15)
        assert v.trace <= 0
        assert float(v) == v.total

    @pytest.mark.parametrize("seed", range(4))
    def test_iff_matches_dense(self, seed):
        rng = np.random.default_rng(100 + seed)
        X, y, k, noise = random_problem(rng, 50, family=["se", "matern12", "matern32", "matern52"][seed])
        g = build_grid(8, default_epsilon(X))
        fast = gp_core.iff_objective(compute_summaries(X, y, g), g, k, noise, density_for(k)).total
        assert fast == pytest.approx(dense_iff_objective(X, y, g, k, noise), rel=1e-8)

    def test_negative_trace_is_clamped_and_noted(self):
        s = DataSummary(1.0, np.zeros(0), np.zeros((0, 0)), 1)
        v = gp_core.collapsed_objective(s, np.zeros(0), 1.0, -0.3)
        assert v.trace == 0.0
        assert v.warnings

    def test_transform_invariance(self, rng):
        X, y, k, noise = random_problem(rng, 40)
        Z = rng.uniform(-5, 5, (6, 1))
        s, Kuu, t = gp_core.sgpr_terms(X, y, k, Z)
        base = gp_core.collapsed_objective(s, Kuu, noise, t).total
        T = np.diag(rng.uniform(0.2, 5.0, 6))
        Kuf = T @ k.gram(Z, X)
        moved = gp_core.collapsed_objective(summaries_from_features(Kuf, y), T @ Kuu @ T, noise, t).total
        assert moved == pytest.approx(base, rel=1e-9)

    def test_diagonal_transform_of_iff_features(self, rng):
        X, y, k, noise = random_problem(rng, 40)
        g = build_grid(12, default_epsilon(X))
        kuu = kuu_diag(g, density_for(k))
        F = feature_matrix(g, X)
        t = gp_core.trace_term(k, X, g, density_for(k))
        base = gp_core.collapsed_objective(summaries_from_features(F, y), kuu, noise, t).total
        d = rng.uniform(0.5, 2.0, F.shape[0])
        moved = gp_core.collapsed_objective(summaries_from_features(d[:, None] * F, y), d**2 * kuu, noise, t).total
        assert moved == pytest.approx(base, rel=1e-9)


class TestSGPR:
    def test_all_points_recovers_exact(self):
        X = np.linspace(-10, 10, 12)[:, None]
        rng = np.random.default_rng(0)
        y = rng.normal(size=12)
        k = Kernel("se", (1.0,))
        F = gp_core.sgpr_inducing_objective(X, y, k, 0.3, X).total
        assert F == pytest.approx(gp_core.exact_log_marginal(X, y, k, 0.3), abs=1e-6)

    def test_far_inducing_point(self, rng):
        X, y, k, noise = random_problem(rng, 20)
        F = gp_core.sgpr_inducing_objective(X, y, k, noise, np.array([[1e4]])).total
        expect = -0.5 * y.size * (LOG2PI + math.log(noise)) - 0.5 * y @ y / noise - 20 * k.variance / (2 * noise)
        assert F == pytest.approx(expect, abs=1e-3)

    def test_strictly_below(self, rng):
        X, y, k, noise = random_problem(rng, 100)
        Z = rng.uniform(-5, 5, (10, 1))
        assert gp_core.sgpr_inducing_objective(X, y, k, noise, Z).total < gp_core.exact_log_marginal(X, y, k, noise)

    def test_matches_dense(self, rng):
        X, y, k, noise = random_problem(rng, 60)
        Z = rng.uniform(-5, 5, (8, 1))
        assert gp_core.sgpr_inducing_objective(X, y, k, noise, Z).total == pytest.approx(dense_sgpr_objective(X, y, k, noise, Z), rel=1e-8)

    @pytest.mark.parametrize("seed", range(100))
    def test_lower_bound(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 201))
        X, y, k, noise = random_problem(rng, n, dim=1 + seed % 2, family=["se", "matern12", "matern32", "matern52"][seed % 4])
        Z = X[rng.choice(n, int(rng.integers(1, min(n, 30) + 1)), replace=False)]
        F = gp_core.sgpr_inducing_objective(X, y, k, noise, Z).total
        assert F - gp_core.exact_log_marginal(X, y, k, noise) <= 1e-9


class TestOptimalQu:
    def test_scalar_example(self):
        st = gp_core.optimal_qu(np.array([[2.0]]), np.array([[1.0, 1.0]]), np.array([1.0, 1.0]), 1.0)
        assert st.sigma_u[0, 0] == pytest.approx(1.0)
        assert st.mu_u[0] == pytest.approx(1.0)
        st = gp_core.optimal_qu(np.array([2.0]), np.array([[1.0, 1.0]]), np.array([1.0, 1.0]), 1.0)
        assert st.sigma_u[0, 0] == pytest.approx(1.0) and st.mu_u[0] == pytest.approx(1.0)

    def test_prior_limit(self, rng):
        Kuu = np.array([[2.0, 0.3], [0.3, 1.0]])
        Kuf = rng.normal(size=(2, 10))
        st = gp_core.optimal_qu(Kuu, Kuf, rng.normal(size=10), 1e8)
        np.testing.assert_allclose(st.sigma_u, Kuu, rtol=1e-6)
        assert np.max(np.abs(st.mu_u)) < 1e-6

    def test_zero_targets(self, rng):
        st = gp_core.optimal_qu(np.array([1.0, 2.0]), rng.normal(size=(2, 5)), np.zeros(5), 0.5)
        assert np.all(st.mu_u == 0.0)

    def test_matches_closed_form(self, rng):
        Kuu = np.array([[2.0, 0.3], [0.3, 1.0]])
        Kuf = rng.normal(size=(2, 10))
        y = rng.normal(size=10)
        noise = 0.7
        st = gp_core.optimal_qu(Kuu, Kuf, y, noise)
        Kinv = np.linalg.inv(Kuu)
        sigma = np.linalg.inv(Kinv @ (Kuu + Kuf @ Kuf.T / noise) @ Kinv)
        np.testing.assert_allclose(st.sigma_u, sigma, rtol=1e-10)
        np.testing.assert_allclose(st.mu_u, sigma @ Kinv @ Kuf @ y / noise, rtol=1e-10)
        np.linalg.cholesky(st.sigma_u + 1e-10 * np.eye(2))


class TestSparsePredict:
    def _setup(self, rng):
        k = Kernel("se", (1.0,))
        Z = rng.uniform(-2, 2, (4, 1))
        Xs = rng.uniform(-3, 3, (6, 1))
        return k, Z, k.gram(Z), k.gram(Z, Xs), Xs

    def test_prior_state(self, rng):
        k, Z, Kuu, Kus, Xs = self._setup(rng)
        Kuu = gp_core.inducing_gram(k, Z)[0]
        p = gp_core.sparse_predict(gp_core.VariationalState(np.zeros(4), Kuu), Kuu, Kus, k, Xs)
        assert np.all(p.mean == 0.0)
        np.testing.assert_allclose(p.variance, k.diag(Xs), rtol=1e-9)

    def test_deterministic_state(self, rng):
        k, Z, Kuu, Kus, Xs = self._setup(rng)
        p = gp_core.sparse_predict(gp_core.VariationalState(rng.normal(size=4), np.zeros((4, 4))), Kuu, Kus, k, Xs)
        assert np.all(p.variance >= -1e-8)

    def test_matches_dense(self, rng):
        k, Z, Kuu, Kus, Xs = self._setup(rng)
        A = rng.normal(size=(4, 4))
        st = gp_core.VariationalState(rng.normal(size=4), A @ A.T * 0.1)
        p = gp_core.sparse_predict(st, Kuu, Kus, k, Xs)
        Kinv = np.linalg.inv(Kuu)
        mean = Kus.T @ Kinv @ st.mu_u
        cov = k.gram(Xs) - Kus.T @ Kinv @ Kus + Kus.T @ Kinv @ st.sigma_u @ Kinv @ Kus
        np.testing.assert_allclose(p.mean, mean, rtol=1e-8)
        np.testing.assert_allclose(p.variance, np.diag(cov), rtol=1e-8)

    def test_variance_below_prior(self, rng):
        X, y, k, noise = random_problem(rng, 80)
        g = build_grid(20, default_epsilon(X))
        p = gp_core.iff_predict(compute_summaries(X, y, g), g, k, noise, density_for(k), rng.uniform(-5, 5, (10, 1)))
        assert np.all(p.variance > 0)
        assert np.all(p.variance <= k.variance + 1e-8)


class TestTrace:
    def test_arithmetic(self):
        # one pair of half-grid spacing 1 with 2 * s = 0.9 gives eps * sum_full s = 0.9
        g = build_grid(2, 1.0)
        assert gp_core.iff_trace(10, 1.0, g, np.array([0.45])) == pytest.approx(1.0)

    def test_empty_grid_limit(self, rng):
        s = DataSummary(1.0, np.zeros(0), np.zeros((0, 0)), 7)
        v = gp_core.collapsed_objective(s, np.zeros(0), 2.0, 7 * 1.5)
        assert v.trace == pytest.approx(-7 * 1.5 / 4)

    def test_matches_elementwise(self, rng):
        X, _, k, _ = random_problem(rng, 25, dim=2)
        g = build_grid(6, default_epsilon(X), 2)
        dens = density_for(k)
        F = feature_matrix(g, X)
        kuu = kuu_diag(g, dens)
        elementwise = float(np.sum(k.diag(X)) - np.sum(F**2 / kuu[:, None]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NegativeTraceWarning)
            assert gp_core.trace_term(k, X, g, dens) == pytest.approx(elementwise, rel=1e-10, abs=1e-10 * X.shape[0])

    def test_covering_grid_is_small(self):
        k = Kernel("se", (1.0,))
        X = np.linspace(0, 10, 50)[:, None]
        g = build_grid(120, 0.05)  # covers |xi| <= 3
        assert gp_core.trace_term(k, X, g, density_for(k)) / 50 < 1e-2

    def test_negative_is_flagged(self):
        # a density with more mass than the kernel variance overshoots the diagonal
        class Heavy(SpectralDensity):
            dim = 1

            def __call__(self, xi):
                return np.full(np.asarray(xi).reshape(-1, 1).shape[0], 10.0)

        with pytest.warns(NegativeTraceWarning):
            t = gp_core.trace_term(Kernel("se", (1.0,)), np.zeros((3, 1)), build_grid(4, 0.5), Heavy())
        assert t == pytest.approx(3 - 3 * 2 * 0.5 * 20.0)


class TestQffPSD:
    @pytest.mark.parametrize("family", ["se", "matern32"])
    def test_low_rank_cov_psd(self, family, rng):
        X, _, k, _ = random_problem(rng, 40, family=family)
        g = build_grid(30, default_epsilon(X))
        F = feature_matrix(g, X)
        Q = F.T @ (F / kuu_diag(g, density_for(k))[:, None])
        np.linalg.cholesky(Q + 1e-10 * np.eye(40) * max(1.0, np.trace(Q) / 40))
