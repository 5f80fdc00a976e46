"""Tests for the bound-constrained L-BFGS driver and line search.

Anchors:
- exact minimizer of an identity-Hessian quadratic in a couple of iterations
- KKT point with an active bound (projected gradient vanishes)
- Rosenbrock to f < 1e-10 within 100 iterations
- two-loop recursion + exact line search terminates in <= dim steps on
  SPD quadratics (the classical conjugate-gradient equivalence)
"""

import numpy as np
import pytest

from viscoinv import optim


class TestQuadratic:
    @pytest.mark.parametrize("dim", [1, 2, 5, 20])
    def test_identity_hessian_exact(self, dim):
        rng = np.random.default_rng(dim)
        a = rng.standard_normal(dim)

        def fun(x):
            d = x - a
            return 0.5 * d @ d, d

        res = optim.minimize(fun, np.zeros(dim))
        assert res.status == "converged"
        assert res.n_iter <= dim + 1
        np.testing.assert_allclose(res.x, a, atol=1e-12)

    def test_history_monotone_and_shaped(self):
        a = np.array([1.0, -2.0, 0.5])

        def fun(x):
            d = x - a
            return 0.5 * d @ d, d

        res = optim.minimize(fun, np.zeros(3))
        hist = np.asarray(res.history)
        assert hist.shape == (res.n_iter + 1, 3)
        assert hist[0, 0] == 0
        fs = hist[:, 1]
        assert np.all(np.diff(fs) <= 1e-15)


class TestBounds:
    def test_active_bound_kkt(self):
        def fun(x):
            return (x[0] - 2.0) ** 2, np.array([2.0 * (x[0] - 2.0)])

        res = optim.minimize(fun, np.array([0.5]), bounds=[(0.0, 1.0)])
        assert res.x[0] == pytest.approx(1.0, abs=1e-12)
        pg = optim.projected_gradient(res.x, res.grad,
                                      (np.array([0.0]), np.array([1.0])))
        assert np.max(np.abs(pg)) < 1e-10

    def test_iterates_respect_bounds(self):
        seen = []

        def fun(x):
            seen.append(x.copy())
            d = x - np.array([5.0, -5.0])
            return 0.5 * d @ d, d

        bounds = [(-1.0, 1.0), (-1.0, 1.0)]
        res = optim.minimize(fun, np.zeros(2), bounds=bounds)
        pts = np.array(seen)
        assert np.all(pts >= -1.0 - 1e-14) and np.all(pts <= 1.0 + 1e-14)
        np.testing.assert_allclose(res.x, [1.0, -1.0], atol=1e-12)

    def test_interior_optimum_unaffected(self):
        def fun(x):
            d = x - 0.3
            return 0.5 * d @ d, d

        res = optim.minimize(fun, np.zeros(2), bounds=[(-1, 1), (-1, 1)])
        np.testing.assert_allclose(res.x, 0.3, atol=1e-12)


class TestRosenbrock:
    @staticmethod
    def rosen(x):
        f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
        g = np.array([
            -400.0 * x[0] * (x[1] - x[0] ** 2) - 2.0 * (1 - x[0]),
            200.0 * (x[1] - x[0] ** 2)])
        return f, g

    def test_classic_start(self):
        res = optim.minimize(self.rosen, np.array([-1.2, 1.0]),
                             config=optim.LbfgsConfig(max_iter=100))
        assert res.f < 1e-10
        assert res.n_iter <= 100
        np.testing.assert_allclose(res.x, 1.0, atol=1e-5)


class TestRobustness:
    def test_nan_objective_flagged(self):
        def fun(x):
            if x[0] > 0.5:
                return np.nan, np.array([np.nan])
            return x[0] ** 2 + 1.0, np.array([2.0 * x[0]])

        res = optim.minimize(fun, np.array([0.4]))
        assert res.status in ("converged", "numerical-failure")
        assert np.isfinite(res.f)

    def test_max_iter_status(self):
        def fun(x):
            d = x - 100.0
            return 0.5 * d @ d, d

        res = optim.minimize(fun, np.zeros(4),
                             config=optim.LbfgsConfig(max_iter=1))
        assert res.status == "max-iter"

    def test_callback_invoked(self):
        seen = []

        def fun(x):
            d = x - 1.0
            return 0.5 * d @ d, d

        optim.minimize(fun, np.zeros(2),
                       callback=lambda xk, f, pg: seen.append((f, pg)))
        assert len(seen) >= 1
        assert seen[-1][1] < 1e-8   # final projected gradient

    def test_config_validation(self):
        with pytest.raises(ValueError):
            optim.LbfgsConfig(memory=0)
        with pytest.raises(ValueError):
            optim.LbfgsConfig(wolfe_c1=0.5, wolfe_c2=0.4)


# ---------------------------------------------------------------------------
# line search
# ---------------------------------------------------------------------------

class TestLineSearch:
    def test_quadratic_exact_first_trials(self):
        phi = lambda a: (a - 1.0) ** 2
        dphi = lambda a: 2.0 * (a - 1.0)
        alpha, trials, ok = optim.line_search(phi, dphi)
        assert ok
        assert alpha == pytest.approx(1.0, rel=1e-8)
        assert trials <= 2

    def test_wolfe_interval(self):
        phi = lambda a: -a + a * a
        dphi = lambda a: -1.0 + 2.0 * a
        alpha, _, ok = optim.line_search(phi, dphi)
        assert ok
        c1, c2 = 1e-4, 0.9
        assert phi(alpha) <= phi(0) + c1 * alpha * dphi(0)
        assert abs(dphi(alpha)) <= c2 * abs(dphi(0))

    def test_ascent_direction_rejected(self):
        with pytest.raises(ValueError):
            optim.line_search(lambda a: a, lambda a: 1.0)

    def test_trial_cap_respected(self):
        phi = lambda a: np.cos(a * 40.0 + 0.2) + a * a
        dphi = lambda a: -40.0 * np.sin(a * 40.0 + 0.2) + 2 * a
        cfg = optim.LbfgsConfig(max_line_trials=25)
        alpha, trials, ok = optim.line_search(phi, dphi, config=cfg)
        assert trials <= 25 + 1
        if alpha is None:
            assert not ok


# ---------------------------------------------------------------------------
# two-loop recursion utilities
# ---------------------------------------------------------------------------

class TestTwoLoop:
    def test_no_pairs_is_steepest_descent(self):
        g = np.array([1.0, -2.0])
        np.testing.assert_allclose(optim.two_loop_direction(g, []), -g)

    def test_pair_rejection(self):
        assert optim.accept_pair(np.array([1.0, 0.0]), np.array([1.0, 0.5]))
        # orthogonal pair carries no usable curvature
        assert not optim.accept_pair(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert not optim.accept_pair(np.zeros(2), np.array([1.0, 1.0]))

    @pytest.mark.parametrize("dim", [2, 3, 5])
    def test_cg_equivalence_exact_line_search(self, dim):
        """Full-memory two-loop + exact line search solves an SPD quadratic
        in at most dim iterations."""
        rng = np.random.default_rng(dim)
        m = rng.standard_normal((dim, dim))
        a = m @ m.T + dim * np.eye(dim)
        b = rng.standard_normal(dim)
        x = np.zeros(dim)
        pairs = []
        for it in range(dim + 1):
            g = a @ x - b
            if np.linalg.norm(g) < 1e-12:
                break
            d = optim.two_loop_direction(g, pairs)
            alpha = -(g @ d) / (d @ a @ d)
            s = alpha * d
            x = x + s
            y = a @ (x) - b - g
            if optim.accept_pair(s, y):
                pairs.append((s, y))
        assert it <= dim
        np.testing.assert_allclose(a @ x, b, atol=1e-10)
