"""Independent ground truth: first-passage integrals, FD solvers, LS fits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special
from scipy.sparse import diags
from scipy.sparse.linalg import splu

from .physics import PdeFamily
from .spline_core import BasisSpec
from .tensor_field import GridDataset, SplineField, eval_on_grid, ls_fit_grid


class QuadratureError(ArithmeticError):
    pass


class SolverError(ArithmeticError):
    pass


# ----------------------------------------------------------------------------
# Recovery probability
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureSpec:
    scheme: str = "gauss-legendre"
    tol: float = 1e-10
    max_subdivisions: int = 64

    def __post_init__(self) -> None:
        if self.scheme not in ("gauss-legendre", "adaptive-simpson"):
            raise ValueError(f"unknown quadrature scheme {self.scheme!r}")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")


def recovery_probability_closed_form(x, t, u, alpha):
    """P(hit alpha before t) for ``dx = u dt + dw`` started at ``x <= alpha``."""
    x, t, u, alpha = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, t, u, alpha)))
    m = alpha - x
    out = np.where(m <= 0, 1.0, 0.0)
    live = (m > 0) & (t > 0)
    if np.any(live):
        mm, tt, uu = m[live], t[live], u[live]
        st = np.sqrt(tt)
        first = special.ndtr((uu * tt - mm) / st)
        # exp(2um) * Phi(z) in log space; 2um can be large.
        second = np.exp(2.0 * uu * mm + special.log_ndtr((-uu * tt - mm) / st))
        out = out.copy()
        out[live] = np.clip(first + second, 0.0, 1.0)
    return out[()] if out.ndim == 0 else out


_GL_NODES = 20


def _log_panel_integral(m, t, u, panels):
    """Integral after tau = m^2 w^2, w = e^y; vectorised over points."""
    lo = -4.0
    hi = np.log(np.sqrt(t) / m)
    hi = np.maximum(hi, lo)
    nodes, weights = np.polynomial.legendre.leggauss(_GL_NODES)
    width = (hi - lo) / panels
    total = np.zeros_like(m)
    for j in range(panels):
        a = lo + j * width
        y = a[:, None] + 0.5 * width[:, None] * (nodes + 1.0)
        w = np.exp(y)
        expo = -((1.0 - u[:, None] * m[:, None] * w * w) ** 2) / (2.0 * w * w)
        f = np.exp(expo) / w
        total += 0.5 * width * (f @ weights)
    return 2.0 / math.sqrt(2.0 * math.pi) * total


def _sigma_integrand(sig, m, u):
    # tau = sig^2 removes the tau^{-3/2} singularity at 0.
    if sig <= 0.0:
        return 0.0
    return 2.0 * m / math.sqrt(2.0 * math.pi) / (sig * sig) * math.exp(-((m - u * sig * sig) ** 2) / (2.0 * sig * sig))


def _adaptive_simpson(f, a, b, tol, depth):
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        if depth <= 0:
            raise QuadratureError("adaptive Simpson did not converge")
        return rec(a, m, fa, flm, fm, left, tol / 2, depth - 1) + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1)

    # Pre-split so narrow peaks are not missed by the first Simpson estimate.
    edges = np.linspace(a, b, 33)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        flo, fmid, fhi = f(lo), f(0.5 * (lo + hi)), f(hi)
        total += rec(lo, hi, flo, fmid, fhi, simpson(flo, fmid, fhi, lo, hi), tol / 32, depth)
    return total


def recovery_probability(x, t, u, alpha, spec: QuadratureSpec | None = None):
    """First-passage probability by quadrature of the hitting-time density."""
    spec = spec or QuadratureSpec()
    x, t, u, alpha = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, t, u, alpha)))
    if np.any(x > alpha):
        raise ValueError("recovery probability needs x <= alpha")
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    m = alpha - x
    out = np.where(m == 0, 1.0, 0.0).astype(np.float64)
    live = (m > 0) & (t > 0)
    if np.any(live):
        mm, tt, uu = m[live].ravel(), t[live].ravel(), u[live].ravel()
        if spec.scheme == "gauss-legendre":
            n = spec.max_subdivisions
            val = _log_panel_integral(mm, tt, uu, n)
            coarse = _log_panel_integral(mm, tt, uu, max(n // 2, 1))
            err = np.abs(val - coarse)
            if np.any(err > max(spec.tol, 1e-8) * 1e3):
                raise QuadratureError(f"Gauss-Legendre panels disagree by {err.max():.3g}")
        else:
            val = np.array([
                _adaptive_simpson(lambda s, m=m_, u=u_: _sigma_integrand(s, m, u), 0.0, math.sqrt(t_),
                                  spec.tol, spec.max_subdivisions)
                for m_, t_, u_ in zip(mm, tt, uu)
            ])
        out = out.copy()
        out[live] = np.clip(val, 0.0, 1.0)
    return out[()] if out.ndim == 0 else out


def recovery_grid(alpha: float, dx: float = 0.1, dt: float = 0.1, x_lo: float = -10.0, t_hi: float = 10.0):
    nx = int(round((alpha - x_lo) / dx)) + 1
    nt = int(round(t_hi / dt)) + 1
    return np.linspace(x_lo, alpha, max(nx, 2)), np.linspace(0.0, t_hi, max(nt, 2))


def generate_recovery_dataset(params: Sequence[tuple[float, float]], dx: float = 0.1, dt: float = 0.1,
                              x_lo: float = -10.0, t_hi: float = 10.0, method: str = "quadrature",
                              spec: QuadratureSpec | None = None) -> list[GridDataset]:
    """One gridded dataset per ``(u, alpha)`` pair on ``[x_lo, alpha] x [0, t_hi]``."""
    out = []
    for u, alpha in params:
        xs, ts = recovery_grid(alpha, dx, dt, x_lo, t_hi)
        X, T = np.meshgrid(xs, ts, indexing="ij")
        if method == "quadrature":
            vals = recovery_probability(X, T, u, alpha, spec)
        elif method == "closed-form":
            vals = recovery_probability_closed_form(X, T, u, alpha)
        else:
            raise ValueError(f"unknown method {method!r}")
        out.append(GridDataset(("x", "t"), (xs, ts), vals, u=[u], alpha=[alpha]))
    return out


# ----------------------------------------------------------------------------
# Finite-difference solvers
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class FdSolverSpec:
    """Grid spacing per spatial axis, output time step and scheme.

    The internal time step is the largest step dividing ``dt`` that meets
    the scheme's stability bound scaled by ``safety``.
    """

    dx: tuple[float, ...]
    dt: float
    scheme: str = "explicit-euler-central"
    safety: float = 0.9

    def __post_init__(self) -> None:
        object.__setattr__(self, "dx", tuple(float(v) for v in np.atleast_1d(self.dx)))
        if self.scheme not in ("explicit-euler-central", "upwind", "crank-nicolson"):
            raise ValueError(f"unknown FD scheme {self.scheme!r}")
        if not 0 < self.safety <= 1:
            raise ValueError("safety factor must be in (0, 1]")


def _substeps(dt_out: float, stable: float, safety: float) -> int:
    return max(1, math.ceil(dt_out / (safety * stable)))


def check_diffusion_number(dt: float, coeffs: Sequence[float], dxs: Sequence[float]) -> None:
    number = sum(c * dt / h**2 for c, h in zip(coeffs, dxs))
    if number > 0.5 + 1e-12:
        raise SolverError(f"explicit diffusion number {number:.3g} exceeds 1/2")


def _axis(lo, hi, h):
    n = int(round((hi - lo) / h)) + 1
    return np.linspace(lo, hi, n)


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise SolverError(f"{what}: non-finite values, scheme unstable")
    return arr


def solve_heat3d(D: float, alpha, spec: FdSolverSpec, t_hi: float = 1.0, ic=None) -> GridDataset:
    """Explicit central differences; x3 faces held at 1, x1/x2 faces zero-flux."""
    h = spec.dx[0] if len(spec.dx) == 1 else spec.dx
    h1, h2, h3 = (h,) * 3 if np.isscalar(h) else h
    x1, x2, x3 = _axis(0, 1, h1), _axis(0, 1, h2), _axis(0, 1, h3)
    ts = _axis(0, t_hi, spec.dt)
    a = np.asarray(alpha, dtype=np.float64)
    X1, X2, X3 = np.meshgrid(x1, x2, x3, indexing="ij")
    s = a[1] * X1 + a[2] * X2 + a[3] * X3 + a[0] if ic is None else ic(X1, X2, X3)
    s = s.astype(np.float64)
    stable = 0.5 / (D * (1 / h1**2 + 1 / h2**2 + 1 / h3**2))
    n_sub = _substeps(spec.dt, stable, spec.safety)
    dt = spec.dt / n_sub
    check_diffusion_number(dt, (D, D, D), (h1, h2, h3))
    out = np.empty((*s.shape, len(ts)))

    def dirichlet(s):
        s[:, :, 0] = 1.0
        s[:, :, -1] = 1.0

    dirichlet(s)
    out[..., 0] = s
    for j in range(1, len(ts)):
        for _ in range(n_sub):
            # Mirror ghosts give zero normal derivative on x1/x2 faces.
            p = np.pad(s, ((1, 1), (1, 1), (0, 0)), mode="reflect")
            lap = (p[2:, 1:-1] - 2 * s + p[:-2, 1:-1]) / h1**2 + (p[1:-1, 2:] - 2 * s + p[1:-1, :-2]) / h2**2
            lap3 = np.zeros_like(s)
            lap3[:, :, 1:-1] = (s[:, :, 2:] - 2 * s[:, :, 1:-1] + s[:, :, :-2]) / h3**2
            s = s + dt * D * (lap + lap3)
            dirichlet(s)
        out[..., j] = _finite(s, "heat3d")
    return GridDataset(("x1", "x2", "x3", "t"), (x1, x2, x3, ts), out, alpha=a)


def _godunov_flux(left, right, u):
    """Exact Riemann flux for f(s) = u s^2 / 2 with u > 0."""
    fl, fr = 0.5 * u * left**2, 0.5 * u * right**2
    flux = np.where(left <= right, np.minimum(fl, fr), np.maximum(fl, fr))
    # Transonic rarefaction: left < 0 < right.
    return np.where((left < 0) & (right > 0), 0.0, flux)


def solve_burgers(u: float, alpha: float, nu: float, spec: FdSolverSpec, x_hi=10.0, t_hi=8.0,
                  ic=None) -> GridDataset:
    """Conservative Godunov convection plus central diffusion, outflow ends."""
    h = spec.dx[0]
    xs = _axis(0.0, x_hi, h)
    ts = _axis(0.0, t_hi, spec.dt)
    s = np.exp(-((xs - alpha) ** 2) / 2.0) if ic is None else ic(xs)
    smax = max(np.abs(s).max(), 1e-12)
    # Combined bound for forward Euler with both the flux and the diffusion stencil.
    stable = 1.0 / (abs(u) * smax / h + 2.0 * nu / h**2)
    n_sub = _substeps(spec.dt, stable, spec.safety)
    dt = spec.dt / n_sub
    out = np.empty((len(xs), len(ts)))
    out[:, 0] = s
    for j in range(1, len(ts)):
        for _ in range(n_sub):
            p = np.concatenate([[s[0]], s, [s[-1]]])
            flux = _godunov_flux(p[:-1], p[1:], u)
            conv = (flux[1:] - flux[:-1]) / h
            diff = nu * (p[2:] - 2 * s + p[:-2]) / h**2
            s = s + dt * (diff - conv)
        out[:, j] = _finite(s, "burgers")
    return GridDataset(("x", "t"), (xs, ts), out, u=[u], alpha=[alpha])


def solve_advection(u: float, alpha: float, spec: FdSolverSpec, form="linear", A=1.0, k=2 * np.pi,
                    x_hi=1.0, t_hi=2.0) -> GridDataset:
    """Periodic advection; upwind or Crank-Nicolson (linear form only)."""
    h = spec.dx[0]
    xs = _axis(0.0, x_hi, h)
    ts = _axis(0.0, t_hi, spec.dt)
    x_per = xs[:-1]  # last node duplicates the first on a periodic grid
    s = A * np.sin(k * x_per + alpha)
    n = len(x_per)
    out = np.empty((len(xs), len(ts)))

    def store(j, s):
        out[:-1, j] = s
        out[-1, j] = s[0]

    store(0, s)
    if spec.scheme == "crank-nicolson":
        if form != "linear":
            raise ValueError("Crank-Nicolson is only provided for the linear form")
        dt = spec.dt
        c = u * dt / (4 * h)
        main = np.ones(n)
        A_imp = diags([main, c * np.ones(n - 1), -c * np.ones(n - 1), [c], [-c]],
                      [0, 1, -1, -(n - 1), n - 1], format="csc")
        B_exp = diags([main, -c * np.ones(n - 1), c * np.ones(n - 1), [-c], [c]],
                      [0, 1, -1, -(n - 1), n - 1], format="csc")
        lu = splu(A_imp)
        for j in range(1, len(ts)):
            s = lu.solve(B_exp @ s)
            store(j, _finite(s, "advection"))
        return GridDataset(("x", "t"), (xs, ts), out, u=[u], alpha=[alpha])
    if spec.scheme != "upwind":
        raise ValueError(f"scheme {spec.scheme!r} not available for advection")
    speed = abs(u) * (A if form == "nonlinear" else 1.0)
    n_sub = _substeps(spec.dt, h / max(speed, 1e-12), spec.safety)
    dt = spec.dt / n_sub
    for j in range(1, len(ts)):
        for _ in range(n_sub):
            if form == "linear":
                if u >= 0:
                    s = s - u * dt / h * (s - np.roll(s, 1))
                else:
                    s = s - u * dt / h * (np.roll(s, -1) - s)
            else:
                flux = _godunov_flux(s, np.roll(s, -1), u)
                s = s - dt / h * (flux - np.roll(flux, 1))
        store(j, _finite(s, "advection"))
    return GridDataset(("x", "t"), (xs, ts), out, u=[u], alpha=[alpha])


def solve_trapezoid_mapped(alpha: float, spec: FdSolverSpec, t_hi: float = 1.0) -> GridDataset:
    """Explicit scheme for the cross-term-free diffusion on the unit square.

    Boundary held at 1, interior starts at 0.
    """
    hu, hv = (spec.dx * 2)[:2] if len(spec.dx) == 1 else spec.dx[:2]
    us, vs = _axis(0, 1, hu), _axis(0, 1, hv)
    ts = _axis(0, t_hi, spec.dt)
    coef_u = 0.5 / (2.0 - vs[None, 1:-1]) ** 2
    coef_v = 0.5 * alpha
    stable = 0.5 / (0.5 / hu**2 + max(coef_v, 0.0) / hv**2)
    n_sub = _substeps(spec.dt, stable, spec.safety)
    dt = spec.dt / n_sub
    check_diffusion_number(dt, (0.5, coef_v), (hu, hv))
    s = np.zeros((len(us), len(vs)))
    s[0, :] = s[-1, :] = s[:, 0] = s[:, -1] = 1.0
    out = np.empty((len(us), len(vs), len(ts)))
    out[..., 0] = s
    # The t = 0 slice keeps the boundary at 1 (boundary wins at the corner edges).
    for j in range(1, len(ts)):
        for _ in range(n_sub):
            suu = (s[2:, 1:-1] - 2 * s[1:-1, 1:-1] + s[:-2, 1:-1]) / hu**2
            svv = (s[1:-1, 2:] - 2 * s[1:-1, 1:-1] + s[1:-1, :-2]) / hv**2
            s = s.copy()
            s[1:-1, 1:-1] += dt * (coef_u * suu + coef_v * svv)
        out[..., j] = _finite(s, "trapezoid")
    return GridDataset(("xi", "eta", "t"), (us, vs, ts), out, alpha=[alpha])


def default_fd_spec(family: PdeFamily) -> FdSolverSpec:
    name = family.name
    if name == "heat3d":
        return FdSolverSpec((1 / 20,), 0.01)
    if name == "burgers":
        return FdSolverSpec((0.01,), 0.04, scheme="upwind")
    if name == "advection":
        return FdSolverSpec((1 / 400,), 0.01, scheme="upwind")
    if name == "trapezoid_diffusion":
        return FdSolverSpec((0.025,), 0.01)
    raise ValueError(f"no finite-difference solver for {name}")


def fd_solve(family: PdeFamily, u, alpha, spec: FdSolverSpec | None = None) -> GridDataset:
    spec = spec or default_fd_spec(family)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    c = family.constants
    if family.name == "heat3d":
        return solve_heat3d(c["D"], alpha, spec)
    if family.name == "burgers":
        return solve_burgers(u[0], alpha[0], c["nu"], spec, c["x_hi"], c["t_hi"])
    if family.name == "advection":
        return solve_advection(u[0], alpha[0], spec, c["form"], c["A"], c["k"], c["x_hi"], c["t_hi"])
    if family.name == "trapezoid_diffusion":
        return solve_trapezoid_mapped(alpha[0], spec, c["t_hi"])
    raise ValueError(f"no finite-difference solver for {family.name}")


# ----------------------------------------------------------------------------
# Ground truth dispatch, LS-optimal control points, derivative checks
# ----------------------------------------------------------------------------

def oracle_dataset(family: PdeFamily, u, alpha, grid: dict | None = None) -> GridDataset:
    """Ground truth for one parameter tuple using the family's best oracle."""
    grid = dict(grid or {})
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    if family.name == "convection_diffusion":
        c = family.constants
        (ds,) = generate_recovery_dataset([(u[0], alpha[0])], grid.get("dx", 0.1), grid.get("dt", 0.1),
                                          c["x_lo"], c["t_hi"], method=grid.get("method", "quadrature"))
        return ds
    if family.name == "advection" and family.constants["form"] == "linear" and grid.get("method") != "fd":
        (lo_x, hi_x), (lo_t, hi_t) = family.domain(u, alpha)
        xs = _axis(lo_x, hi_x, grid.get("dx", 0.01))
        ts = _axis(lo_t, hi_t, grid.get("dt", 0.01))
        vals = family.exact(u, alpha, xs[:, None], ts[None, :])
        return GridDataset(("x", "t"), (xs, ts), vals, u=u, alpha=alpha)
    spec = default_fd_spec(family)
    if "dx" in grid or "dt" in grid:
        spec = FdSolverSpec(tuple(np.atleast_1d(grid.get("dx", spec.dx))), grid.get("dt", spec.dt),
                            grid.get("scheme", spec.scheme))
    return fd_solve(family, u, alpha, spec)


def ls_optimal_control_points(axes: Sequence[BasisSpec], data: GridDataset) -> np.ndarray:
    """Unconstrained least-squares control tensor for an oracle dataset."""
    return ls_fit_grid(axes, data.axis_points, data.values)


def fd_derivative_check(field: SplineField, grid: Sequence[Sequence[float]], orders: Sequence[int],
                        step: float = 1e-6, margin: int = 1) -> dict:
    """Compare an analytic partial with a central difference of the next lower one.

    The highest-order differentiated axis is differenced; ``margin`` grid
    nodes are dropped at each end of every axis.
    """
    orders = tuple(int(p) for p in orders)
    grid = [np.asarray(g, dtype=np.float64) for g in grid]
    inner = [g[margin: len(g) - margin] if margin else g for g in grid]
    if not any(orders):
        return {"max_abs_error": 0.0, "orders": orders, "points": int(np.prod([len(g) for g in inner]))}
    k = max(range(len(orders)), key=lambda i: orders[i])
    lower = list(orders)
    lower[k] -= 1
    analytic = eval_on_grid(field, inner, orders)
    plus = [g if i != k else g + step for i, g in enumerate(inner)]
    minus = [g if i != k else g - step for i, g in enumerate(inner)]
    fd = (eval_on_grid(field, plus, lower) - eval_on_grid(field, minus, lower)) / (2 * step)
    err = np.abs(analytic - fd)
    return {"max_abs_error": float(err.max()), "orders": orders, "points": int(err.size),
            "argmax": tuple(int(i) for i in np.unravel_index(err.argmax(), err.shape))}
