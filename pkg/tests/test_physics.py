import numpy as np
import pytest

from pidbsn.physics import (
    FAMILIES,
    DomainMapError,
    PinRule,
    Region,
    family_from_dict,
    make_family,
    map_trapezoid,
    neumann_residual,
    residual_advection,
    residual_burgers,
    residual_convection_diffusion,
    residual_heat3d,
    residual_trapezoid_mapped,
    unmap_trapezoid,
)
from pidbsn.spline_core import BasisSpec
from pidbsn.tensor_field import SplineField, eval_on_grid, ls_fit_grid


def sample_params(family, rng):
    u = np.array([rng.uniform(lo, hi) for lo, hi in family.u_range])
    a = np.array([rng.uniform(lo, hi) for lo, hi in family.alpha_range])
    return u, a


def interior_grid(family, u, alpha, n):
    return Region().grid(family.domain(u, alpha), [n] * family.ndim)


def fitted_derivs(family, u, alpha, fn, count, degree, n_fit, n_eval):
    bounds = family.domain(u, alpha)
    axes = [BasisSpec(lo, hi, degree, count) for lo, hi in bounds]
    g = [np.linspace(lo, hi, n_fit) for lo, hi in bounds]
    mesh = np.meshgrid(*g, indexing="ij")
    field = SplineField(axes, ls_fit_grid(axes, g, fn(*mesh)))
    pts = interior_grid(family, u, alpha, n_eval)
    orders = {o for eq in family.equations() for o in eq.orders}
    return {o: eval_on_grid(field, pts, o) for o in orders}, pts


class TestPointwiseResiduals:
    def test_constant_fields(self):
        z = np.zeros(5)
        c = np.full(5, 0.37)
        assert np.all(residual_convection_diffusion(z, z, z, 1.3) == 0)
        assert np.all(residual_heat3d(z, z, z, z, 0.1) == 0)
        assert np.all(neumann_residual(z) == 0)
        assert np.all(residual_burgers(c, z, z, z, 0.8, 0.01) == 0)
        assert np.all(residual_advection(c, z, z, 1.2, "linear") == 0)
        assert np.all(residual_advection(c, z, z, 1.2, "nonlinear") == 0)
        assert np.all(residual_trapezoid_mapped(z, z, z, 0.7, np.linspace(0, 1, 5)) == 0)

    def test_travelling_affine(self):
        u = 1.7
        # s = x + u t
        assert residual_convection_diffusion(u, 1.0, 0.0, u) == 0.0

    def test_unknown_advection_form(self):
        with pytest.raises(ValueError):
            residual_advection(0.0, 0.0, 0.0, 1.0, "quadratic")

    def test_trapezoid_alpha_zero_term_dropout(self, rng):
        s_t = rng.normal(size=10)
        v = rng.uniform(0, 1, 10)
        np.testing.assert_array_equal(residual_trapezoid_mapped(s_t, np.zeros(10), rng.normal(size=10), 0.0, v), s_t)

    def test_nonlinear_advection_of_initial_sine(self, rng):
        A, k, u, a = 1.0, 2 * np.pi, 1.1, 0.4
        x = rng.uniform(0, 1, 20)
        s = A * np.sin(k * x + a)
        s_x = A * k * np.cos(k * x + a)
        got = residual_advection(s, 0.0, s_x, u, "nonlinear")
        np.testing.assert_allclose(got, u * A**2 * k * np.sin(k * x + a) * np.cos(k * x + a), atol=1e-13)


class TestAnalyticSolutions:
    N = 100

    def test_recovery_probability(self, rng):
        from pidbsn.oracles import recovery_probability_closed_form

        # finite differences of the closed form on smooth interior points
        for _ in range(20):
            u, alpha = rng.uniform(0, 2), rng.uniform(0, 4)
            x, t = rng.uniform(-5, alpha - 1), rng.uniform(1, 10)
            h = 1e-3
            f = lambda x_, t_: recovery_probability_closed_form(x_, t_, u, alpha)
            s_t = (f(x, t + h) - f(x, t - h)) / (2 * h)
            s_x = (f(x + h, t) - f(x - h, t)) / (2 * h)
            s_xx = (f(x + h, t) - 2 * f(x, t) + f(x - h, t)) / h**2
            assert abs(residual_convection_diffusion(s_t, s_x, s_xx, u)) < 1e-5

    def test_heat_eigenfunction(self, rng):
        D = 0.1
        x1, x2, x3, t = rng.uniform(0, 1, (4, self.N))
        lam = 3 * D * np.pi**2
        s = np.exp(-lam * t) * np.cos(np.pi * x1) * np.cos(np.pi * x2) * np.cos(np.pi * x3)
        r = residual_heat3d(-lam * s, -np.pi**2 * s, -np.pi**2 * s, -np.pi**2 * s, D)
        assert np.abs(r).max() <= 1e-10
        # zero flux on x1 = 0 and x1 = 1: sin(0) = sin(pi) ~ 0
        for face in (0.0, 1.0):
            flux = -np.pi * np.sin(np.pi * face) * np.cos(np.pi * x2) * np.cos(np.pi * x3) * np.exp(-lam * t)
            assert np.abs(neumann_residual(flux)).max() <= 1e-10

    def test_heat_affine_initial_data(self, rng):
        fam = make_family("heat3d")
        a = np.array([0.3, 0.2, -0.4, 0.1])
        fn = lambda x1, x2, x3, t: fam.initial_condition(None, a, x1, x2, x3) + 0 * t
        d, pts = fitted_derivs(fam, np.zeros(0), a, fn, count=4, degree=2, n_fit=6, n_eval=4)
        r = fam.equations()[0].residual(d, pts, np.zeros(0), a)
        assert np.abs(r).max() <= 1e-10

    def test_burgers_rarefaction(self, rng):
        u = rng.uniform(0.5, 1.5, self.N)
        x = rng.uniform(0, 10, self.N)
        t = rng.uniform(0, 8, self.N)
        c = 1.0 + u * t
        s = x / c
        r = residual_burgers(s, -u * x / c**2, 1.0 / c, 0.0, u, 0.0)
        assert np.abs(r).max() <= 1e-10

    def test_linear_advection_wave(self, rng):
        A, k = 1.0, 2 * np.pi
        u = rng.uniform(0.5, 1.5, self.N)
        a = rng.uniform(0, 2 * np.pi, self.N)
        x, t = rng.uniform(0, 1, self.N), rng.uniform(0, 2, self.N)
        ph = k * (x - u * t) + a
        r = residual_advection(A * np.sin(ph), -A * k * u * np.cos(ph), A * k * np.cos(ph), u, "linear")
        assert np.abs(r).max() <= 1e-10

    def test_advection_exact_matches_family(self, rng):
        fam = make_family("advection_linear")
        u, a = sample_params(fam, rng)
        x, t = rng.uniform(0, 1, 5), rng.uniform(0, 2, 5)
        np.testing.assert_allclose(fam.exact(u, a, x, t), np.sin(2 * np.pi * (x - u[0] * t) + a[0]))
        np.testing.assert_allclose(fam.exact(u, a, x, 0 * t), fam.initial_condition(u, a, x))
        assert make_family("advection_nonlinear").exact(u, a, x, t) is None


class TestFittedResiduals:
    def test_heat_eigenfunction_spline_fit(self):
        fam = make_family("heat3d")
        D = fam.constants["D"]
        lam = 3 * D * np.pi**2
        fn = lambda x1, x2, x3, t: np.exp(-lam * t) * np.cos(np.pi * x1) * np.cos(np.pi * x2) * np.cos(np.pi * x3)
        u, a = np.zeros(0), np.array([0.5, 0, 0, 0])
        d, pts = fitted_derivs(fam, u, a, fn, count=15, degree=3, n_fit=29, n_eval=8)
        r = fam.equations()[0].residual(d, np.meshgrid(*pts, indexing="ij"), u, a)
        assert np.abs(r).mean() <= 1e-2

    def test_advection_fit_converges(self):
        fam = make_family("advection_linear")
        u, a = np.array([1.0]), np.array([0.3])
        fn = lambda x, t: fam.exact(u, a, x, t)
        means = []
        for count in (10, 20, 40):
            d, pts = fitted_derivs(fam, u, a, fn, count, degree=4, n_fit=4 * count, n_eval=60)
            coords = np.meshgrid(*pts, indexing="ij")
            means.append(np.abs(fam.equations()[0].residual(d, coords, u, a)).mean())
        assert means[1] <= 1.2 * means[0] and means[2] <= 1.2 * means[1]
        assert means[2] < means[0]

    def test_recovery_fit_decreases(self):
        fam = make_family("recovery")
        u, a = np.array([1.0]), np.array([2.0])
        fn = lambda x, t: fam.exact(u, a, x, t)
        means = []
        for count in (10, 20, 40):
            d, pts = fitted_derivs(fam, u, a, fn, count, degree=3, n_fit=121, n_eval=50)
            coords = np.meshgrid(*pts, indexing="ij")
            means.append(np.abs(fam.equations()[0].residual(d, coords, u, a)).mean())
        assert means[2] < means[0]


class TestJacobians:
    @pytest.mark.parametrize("name", ["convection_diffusion", "heat3d", "burgers",
                                      "advection_linear", "advection_nonlinear", "trapezoid_diffusion"])
    def test_matches_finite_differences(self, name, rng):
        fam = make_family(name)
        u, a = sample_params(fam, rng)
        for eq in fam.equations():
            shape = (7,)
            coords = [rng.uniform(0.05, 0.95, shape) for _ in range(fam.ndim)]
            d = {o: rng.normal(size=shape) for o in eq.orders}
            jac = eq.jacobian(d, coords, u, a)
            assert set(jac) <= set(eq.orders)
            for o in eq.orders:
                h = 1e-6
                dp = {**d, o: d[o] + h}
                dm = {**d, o: d[o] - h}
                fd = (eq.residual(dp, coords, u, a) - eq.residual(dm, coords, u, a)) / (2 * h)
                np.testing.assert_allclose(np.broadcast_to(jac.get(o, 0.0), shape), fd, atol=1e-7)

    @pytest.mark.parametrize("name", sorted(FAMILIES))
    def test_constant_field_zero_residual(self, name, rng):
        fam = make_family(name)
        u, a = sample_params(fam, rng)
        for eq in fam.equations():
            coords = [rng.uniform(0.05, 0.95, 6) for _ in range(fam.ndim)]
            d = {o: (np.full(6, 0.8) if sum(o) == 0 else np.zeros(6)) for o in eq.orders}
            assert np.all(eq.residual(d, coords, u, a) == 0)


class TestTrapezoidMap:
    def test_corners(self):
        for (x, y), (uu, vv) in [((-1, 0), (0, 0)), ((1, 0), (1, 0)), ((-0.5, 1), (0, 1)), ((0.5, 1), (1, 1))]:
            got = map_trapezoid(x, y)
            assert float(got[0]) == pytest.approx(uu, abs=1e-15) and float(got[1]) == vv

    def test_round_trip(self, rng):
        y = rng.uniform(0, 1, 1000)
        half = 1 - 0.5 * y
        x = rng.uniform(-half, half)
        uu, vv = map_trapezoid(x, y)
        assert np.all((uu >= 0) & (uu <= 1))
        xb, yb = unmap_trapezoid(uu, vv)
        assert np.abs(xb - x).max() <= 1e-14 and np.abs(yb - y).max() <= 1e-14
        uu2, vv2 = map_trapezoid(*unmap_trapezoid(uu, vv))
        assert np.abs(uu2 - uu).max() <= 1e-14

    def test_outside(self):
        with pytest.raises(DomainMapError):
            map_trapezoid(0.9, 0.5)
        with pytest.raises(DomainMapError):
            map_trapezoid(0.0, 1.5)
        with pytest.raises(DomainMapError):
            unmap_trapezoid(1.2, 0.5)


class TestFamilies:
    def test_registry_and_aliases(self):
        assert make_family("recovery").name == "convection_diffusion"
        assert make_family("advection_nonlinear").constants["form"] == "nonlinear"
        with pytest.raises(ValueError):
            make_family("wave")
        with pytest.raises(ValueError):
            make_family("burgers", viscosity=1.0)
        with pytest.raises(ValueError):
            make_family("advection", form="cubic")

    @pytest.mark.parametrize("name", sorted(FAMILIES))
    def test_dict_round_trip(self, name):
        fam = make_family(name)
        again = family_from_dict(fam.to_dict())
        assert type(again) is type(fam) and again.to_dict() == fam.to_dict()

    def test_range_override(self):
        fam = make_family("burgers", u_range=[[0.9, 1.1]], nu=0.02)
        assert fam.u_range == ((0.9, 1.1),) and fam.constants["nu"] == 0.02
        with pytest.raises(ValueError):
            make_family("burgers", u_range=[[2.0, 1.0]])

    def test_pin_rule_validation(self):
        with pytest.raises(ValueError):
            PinRule(0, "middle", 1.0)
        with pytest.raises(ValueError):
            PinRule(0, "first", "bc")

    def test_region_grid(self, rng):
        bounds = [(0.0, 1.0), (-2.0, 2.0)]
        pts = Region().grid(bounds, [4, 2])
        np.testing.assert_allclose(pts[0], [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(pts[1], [-1.0, 1.0])
        face = Region(1, "last").grid(bounds, [4, 2])
        assert face[1].tolist() == [2.0] and face[0].size == 4
        jit = Region().grid(bounds, [50, 50], rng)
        assert all(np.all((p > lo) & (p < hi)) for p, (lo, hi) in zip(jit, bounds))

    def test_recovery_domain_follows_alpha(self):
        fam = make_family("recovery")
        assert fam.domain(np.array([1.0]), np.array([2.5])) == [(-10.0, 2.5), (0.0, 10.0)]
