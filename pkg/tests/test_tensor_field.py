import numpy as np
import pytest
from scipy.integrate import trapezoid

from pidbsn.spline_core import BasisSpec, OutOfDomainError, basis_matrix
from pidbsn.tensor_field import (
    FitError,
    GridDataset,
    SplineField,
    convex_hull_bounds,
    eval_field,
    eval_field_partial,
    eval_on_grid,
    ls_fit,
    ls_fit_grid,
    ls_residual_gradient,
)

from conftest import nested_sum


def random_field(rng, counts, orders, bounds=None):
    bounds = bounds or [(-1.0, 2.0)] * len(counts)
    axes = [BasisSpec(lo, hi, d, n) for (lo, hi), d, n in zip(bounds, orders, counts)]
    return SplineField(axes, rng.normal(size=tuple(counts)))


def random_point(rng, field):
    return [rng.uniform(a.lo, a.hi) for a in field.axes]


class TestEvaluation:
    def test_constant_field(self, rng):
        f = random_field(rng, (5, 6, 4), (2, 3, 1))
        f.coeffs[...] = 0.7
        for _ in range(10):
            assert eval_field(f, random_point(rng, f)) == pytest.approx(0.7, abs=1e-14)

    def test_separable(self, rng):
        ax = [BasisSpec(0, 1, 3, 6), BasisSpec(-2, 2, 2, 5)]
        a, b = rng.normal(size=6), rng.normal(size=5)
        f = SplineField(ax, np.outer(a, b))
        x1, x2 = 0.3, -1.1
        expected = (basis_matrix(ax[0], x1)[0] @ a) * (basis_matrix(ax[1], x2)[0] @ b)
        assert eval_field(f, [x1, x2]) == pytest.approx(expected, abs=1e-13)

    def test_matches_nested_sum(self, rng):
        f = random_field(rng, (4, 5, 6), (1, 2, 3))
        for _ in range(10):
            pt = random_point(rng, f)
            assert abs(eval_field(f, pt) - nested_sum(f.coeffs, f.axes, pt)) <= 1e-12

    def test_dimension_and_domain_errors(self, rng):
        f = random_field(rng, (4, 5), (2, 2))
        with pytest.raises(ValueError):
            eval_field(f, [0.0])
        with pytest.raises(OutOfDomainError):
            eval_field(f, [0.0, 3.0])
        with pytest.raises(ValueError):
            SplineField(f.axes, np.zeros((4, 4)))


class TestPartials:
    def test_zero_orders(self, rng):
        f = random_field(rng, (5, 5), (3, 3))
        pt = random_point(rng, f)
        assert eval_field_partial(f, pt, (0, 0)) == eval_field(f, pt)

    def test_constant_field_derivatives_vanish(self, rng):
        f = random_field(rng, (6, 5), (3, 2))
        f.coeffs[...] = -1.3
        for orders in [(1, 0), (0, 1), (2, 1), (3, 2)]:
            assert abs(eval_field_partial(f, random_point(rng, f), orders)) <= 1e-11

    def test_second_x_derivative_of_fitted_polynomial(self):
        axes = [BasisSpec(0, 1, 3, 8), BasisSpec(0, 1, 3, 8)]
        g = [np.linspace(0, 1, 41)] * 2
        vals = g[0][:, None] ** 2 * g[1][None, :]
        f = SplineField(axes, ls_fit_grid(axes, g, vals))
        for x, t in [(0.3, 0.2), (0.55, 0.9), (0.71, 0.5)]:
            assert eval_field_partial(f, [x, t], (2, 0)) == pytest.approx(2 * t, abs=1e-9)

    def test_invalid_order(self, rng):
        f = random_field(rng, (5, 5), (2, 2))
        with pytest.raises(ValueError):
            eval_field_partial(f, [0.0, 0.0], (3, 0))


class TestGrid:
    def test_single_point_grid(self, rng):
        f = random_field(rng, (5, 6), (2, 3))
        pt = random_point(rng, f)
        out = eval_on_grid(f, [[pt[0]], [pt[1]]], (1, 2))
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(eval_field_partial(f, pt, (1, 2)), abs=1e-12)

    @pytest.mark.parametrize("orders", [(0, 0), (1, 0), (0, 2), (1, 1)])
    def test_matches_pointwise_loop(self, rng, orders):
        f = random_field(rng, (6, 5), (3, 2))
        g = [np.sort(rng.uniform(a.lo, a.hi, 5)) for a in f.axes]
        grid_vals = eval_on_grid(f, g, orders)
        for i, x in enumerate(g[0]):
            for j, t in enumerate(g[1]):
                assert abs(grid_vals[i, j] - eval_field_partial(f, [x, t], orders)) <= 1e-12

    def test_constant(self, rng):
        f = random_field(rng, (4, 4, 4), (2, 2, 2))
        f.coeffs[...] = 3.0
        g = [np.linspace(a.lo, a.hi, n) for a, n in zip(f.axes, (3, 4, 5))]
        np.testing.assert_allclose(eval_on_grid(f, g), 3.0, atol=1e-14)

    def test_nested_sum_three_axes(self, rng):
        f = random_field(rng, (3, 5, 6), (2, 4, 5))
        g = [np.sort(rng.uniform(a.lo, a.hi, 3)) for a in f.axes]
        vals = eval_on_grid(f, g)
        for idx in np.ndindex(vals.shape):
            pt = [g[k][i] for k, i in enumerate(idx)]
            assert abs(vals[idx] - nested_sum(f.coeffs, f.axes, pt)) <= 1e-12


class TestLeastSquares:
    def test_recovers_representable_coefficients(self, rng):
        f = random_field(rng, (7, 6), (3, 2))
        g = [np.linspace(a.lo, a.hi, 25) for a in f.axes]
        data = GridDataset(("x", "t"), g, eval_on_grid(f, g))
        np.testing.assert_allclose(ls_fit(f.axes, data), f.coeffs, atol=1e-8)

    @pytest.mark.parametrize("count", [2, 3, 7, 12])
    def test_linear_reproduction(self, count):
        ax = [BasisSpec(0, 1, 1, count)]
        x = np.linspace(0, 1, 3 * count + 1)
        fit = SplineField(ax, ls_fit_grid(ax, [x], x))
        np.testing.assert_allclose(eval_on_grid(fit, [x]), x, atol=1e-12)

    def test_gradient_vanishes_at_solution(self, rng):
        ax = [BasisSpec(0, 2, 3, 9), BasisSpec(-1, 1, 2, 6)]
        g = [np.linspace(0, 2, 30), np.linspace(-1, 1, 20)]
        vals = np.sin(3 * g[0])[:, None] * np.cos(g[1])[None, :] + 0.1 * rng.normal(size=(30, 20))
        C = ls_fit_grid(ax, g, vals)
        assert np.abs(ls_residual_gradient(ax, g, vals, C)).max() <= 1e-8

    def test_single_entry_perturbation_does_not_improve(self, rng):
        ax = [BasisSpec(0, 1, 2, 5), BasisSpec(0, 1, 3, 6)]
        g = [np.linspace(0, 1, 17), np.linspace(0, 1, 13)]
        vals = np.exp(g[0])[:, None] * g[1][None, :] ** 3 + 0.05 * rng.normal(size=(17, 13))

        def sse(C):
            return float(np.sum((eval_on_grid(SplineField(ax, C), g) - vals) ** 2))

        C = ls_fit_grid(ax, g, vals)
        base = sse(C)
        for idx in np.ndindex(C.shape):
            for delta in (1e-3, -1e-3):
                P = C.copy()
                P[idx] += delta
                assert sse(P) >= base

    def test_rank_deficient(self):
        ax = [BasisSpec(0, 1, 3, 8)]
        with pytest.raises(FitError):
            ls_fit_grid(ax, [np.linspace(0, 1, 5)], np.zeros(5))
        # enough samples, but all crowded into one knot span
        x = np.linspace(0.0, 0.05, 20)
        with pytest.raises(FitError):
            ls_fit_grid(ax, [x], np.zeros(20))

    def test_sin_error_monotone_in_count(self):
        errs = []
        for count in (8, 16, 32):
            ax = [BasisSpec(0, np.pi, 3, count)]
            x = np.linspace(0, np.pi, 8 * (count - 3) + 1)
            fit = SplineField(ax, ls_fit_grid(ax, [x], np.sin(x)))
            xf = np.linspace(0, np.pi, 8 * 8 * (count - 3) + 1)
            errs.append(np.sqrt(trapezoid((eval_on_grid(fit, [xf]) - np.sin(xf)) ** 2, xf)))
        assert errs[0] > errs[1] > errs[2]


class TestConvexHull:
    def test_constant(self):
        ax = [BasisSpec(0, 1, 2, 4), BasisSpec(0, 1, 2, 5)]
        f = SplineField(ax, np.full((4, 5), 0.5))
        assert convex_hull_bounds(f) == (0.5, 0.5)
        np.testing.assert_allclose(eval_on_grid(f, [np.linspace(0, 1, 7)] * 2), 0.5, atol=1e-15)

    def test_unit_interval_coefficients(self, rng):
        f = random_field(rng, (6, 7), (3, 3), bounds=[(-10, 2), (0, 10)])
        f.coeffs = rng.uniform(0, 1, size=(6, 7))
        g = [np.linspace(a.lo, a.hi, 101) for a in f.axes]
        vals = eval_on_grid(f, g)
        assert vals.min() >= 0.0 and vals.max() <= 1.0

    def test_random_sampling(self, rng):
        f = random_field(rng, (5, 6, 4), (2, 3, 3))
        lo, hi = convex_hull_bounds(f)
        pts = [rng.uniform(a.lo, a.hi, 22) for a in f.axes]  # 22^3 > 10^4 evaluations
        vals = eval_on_grid(f, pts)
        assert vals.min() >= lo - 1e-12 and vals.max() <= hi + 1e-12
