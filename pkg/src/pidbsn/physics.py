"""PDE families: residuals, collocation regions, ICBC rules and domain maps.

A family lists one or more equations.  Each equation needs a set of partial
derivatives of the field (multi-indices over the family's axes), a residual
built from them, and the partials of that residual with respect to each
derivative field.  The last piece lets the loss gradient flow back to the
control tensor without automatic differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

Orders = tuple[int, ...]


# ----------------------------------------------------------------------------
# Pointwise residuals.  Arguments are partial derivatives (arrays broadcast).
# ----------------------------------------------------------------------------

def residual_convection_diffusion(s_t, s_x, s_xx, u):
    return s_t - u * s_x - 0.5 * s_xx


def residual_heat3d(s_t, s_x1x1, s_x2x2, s_x3x3, D):
    return s_t - D * (s_x1x1 + s_x2x2 + s_x3x3)


def neumann_residual(s_normal):
    """Normal derivative on a zero-flux face."""
    return s_normal


def residual_burgers(s, s_t, s_x, s_xx, u, nu):
    return s_t + u * s * s_x - nu * s_xx


def residual_advection(s, s_t, s_x, u, form="linear"):
    if form == "linear":
        return s_t + u * s_x
    if form == "nonlinear":
        return s_t + u * s * s_x
    raise ValueError(f"unknown advection form {form!r}")


def residual_trapezoid_mapped(s_t, s_uu, s_vv, alpha, v):
    """Cross-term-free diffusion on the mapped unit square."""
    return s_t - 0.5 * (s_uu / (2.0 - v) ** 2 + alpha * s_vv)


# ----------------------------------------------------------------------------
# Trapezoid <-> unit square
# ----------------------------------------------------------------------------

class DomainMapError(ValueError):
    pass


def _check_trapezoid(x, y, tol=1e-12):
    if np.any((y < -tol) | (y > 1 + tol)):
        raise DomainMapError("y outside [0, 1]")
    if np.any(x < -1 + 0.5 * y - tol) or np.any(x > 1 - 0.5 * y + tol):
        raise DomainMapError("point outside the trapezoid")


def map_trapezoid(x, y):
    """Trapezoid ``{y in [0,1], |x| <= 1 - y/2}`` to the unit square."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_trapezoid(x, y)
    return (x + 1.0 - 0.5 * y) / (2.0 - y), y.copy()


def unmap_trapezoid(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    tol = 1e-12
    if np.any((u < -tol) | (u > 1 + tol) | (v < -tol) | (v > 1 + tol)):
        raise DomainMapError("point outside the unit square")
    return -1.0 + 0.5 * v + (2.0 - v) * u, v.copy()


# ----------------------------------------------------------------------------
# Families
# ----------------------------------------------------------------------------

Coords = Sequence[np.ndarray]
Derivs = Mapping[Orders, np.ndarray]


@dataclass(frozen=True)
class Region:
    """Collocation region: the open box, or one face (``axis`` pinned to a side)."""

    axis: int | None = None
    side: str = "first"

    def grid(self, bounds: Sequence[tuple[float, float]], counts: Sequence[int],
             rng: np.random.Generator | None = None) -> list[np.ndarray]:
        pts = []
        for k, ((lo, hi), n) in enumerate(zip(bounds, counts)):
            if k == self.axis:
                pts.append(np.array([lo if self.side == "first" else hi]))
                continue
            # Cell centres stay off the faces, where ICBC pins act.
            offset = 0.5 if rng is None else rng.uniform(0.0, 1.0, size=n)
            pts.append(lo + (hi - lo) * (np.arange(n) + offset) / n)
        return pts


@dataclass
class Equation:
    name: str
    orders: tuple[Orders, ...]
    residual: Callable[[Derivs, Coords, np.ndarray, np.ndarray], np.ndarray]
    jacobian: Callable[[Derivs, Coords, np.ndarray, np.ndarray], dict]
    region: Region = field(default_factory=Region)


@dataclass(frozen=True)
class PinRule:
    """Pin the first or last control slice along ``axis`` to a value.

    ``value`` is a float for constant Dirichlet data or ``"ic"`` for the
    family's initial condition, fitted by least squares on the slice.
    """

    axis: int
    side: str
    value: float | str

    def __post_init__(self) -> None:
        if self.side not in ("first", "last"):
            raise ValueError(f"side must be 'first' or 'last', got {self.side!r}")
        if isinstance(self.value, str) and self.value != "ic":
            raise ValueError(f"pin value must be a number or 'ic', got {self.value!r}")


def _unit(n: int, k: int, p: int = 1) -> Orders:
    o = [0] * n
    o[k] = p
    return tuple(o)


class PdeFamily:
    """Base class; subclasses fill in the class attributes and hooks."""

    name: str = ""
    axis_names: tuple[str, ...] = ()
    u_names: tuple[str, ...] = ()
    alpha_names: tuple[str, ...] = ()
    u_range: tuple[tuple[float, float], ...] = ()
    alpha_range: tuple[tuple[float, float], ...] = ()
    # Default cell-centred collocation points per axis.
    collocation: tuple[int, ...] = ()

    def __init__(self, **constants) -> None:
        unknown = set(constants) - set(self.defaults()) - {"u_range", "alpha_range"}
        if unknown:
            raise ValueError(f"unknown constants for {self.name}: {sorted(unknown)}")
        self.constants = {**self.defaults(), **constants}
        for key in ("u_range", "alpha_range"):
            if key in self.constants:
                setattr(self, key, tuple(tuple(map(float, r)) for r in self.constants[key]))
        for lo, hi in (*self.u_range, *self.alpha_range):
            if not lo <= hi:
                raise ValueError(f"empty parameter range [{lo}, {hi}]")

    @classmethod
    def defaults(cls) -> dict:
        return {}

    @property
    def ndim(self) -> int:
        return len(self.axis_names)

    @property
    def param_dims(self) -> tuple[int, int]:
        return len(self.u_names), len(self.alpha_names)

    def domain(self, u: np.ndarray, alpha: np.ndarray) -> list[tuple[float, float]]:
        raise NotImplementedError

    def equations(self) -> list[Equation]:
        raise NotImplementedError

    def pin_rules(self) -> list[PinRule]:
        """Rules in precedence order: earlier rules win on shared entries."""
        return []

    def initial_condition(self, u, alpha, *coords):
        raise NotImplementedError(f"{self.name} has no fitted initial condition")

    def exact(self, u, alpha, *coords):
        """Closed-form solution on broadcast coordinates, if one exists."""
        return None

    def to_dict(self) -> dict:
        return {"name": self.name, **{k: (list(map(list, v)) if k.endswith("range") else v)
                                      for k, v in self.constants.items()}}


class ConvectionDiffusion(PdeFamily):
    """First-passage (recovery) probability of ``dx = u dt + dw`` into ``x >= alpha``."""

    name = "convection_diffusion"
    axis_names = ("x", "t")
    u_names = ("u",)
    alpha_names = ("alpha",)
    u_range = ((0.0, 2.0),)
    alpha_range = ((0.0, 4.0),)
    collocation = (120, 100)

    @classmethod
    def defaults(cls):
        return {"x_lo": -10.0, "t_hi": 10.0}

    def domain(self, u, alpha):
        return [(self.constants["x_lo"], float(alpha[0])), (0.0, self.constants["t_hi"])]

    def equations(self):
        def res(d, coords, u, alpha):
            return residual_convection_diffusion(d[(0, 1)], d[(1, 0)], d[(2, 0)], u[0])

        def jac(d, coords, u, alpha):
            return {(0, 1): 1.0, (1, 0): -u[0], (2, 0): -0.5}

        return [Equation("pde", ((0, 1), (1, 0), (2, 0)), res, jac)]

    def pin_rules(self):
        # s(alpha, t) = 1 wins over s(x, 0) = 0 at the corner.
        return [PinRule(0, "last", 1.0), PinRule(1, "first", 0.0)]

    def exact(self, u, alpha, x, t):
        from .oracles import recovery_probability_closed_form

        return recovery_probability_closed_form(x, t, u[0], alpha[0])


class Heat3D(PdeFamily):
    """Heat equation in the unit cube with affine initial data.

    ``x3`` faces are Dirichlet 1, ``x1``/``x2`` faces are zero-flux.
    """

    name = "heat3d"
    axis_names = ("x1", "x2", "x3", "t")
    alpha_names = ("alpha0", "alpha1", "alpha2", "alpha3")
    alpha_range = ((0.0, 1.0), (-0.5, 0.5), (-0.5, 0.5), (-0.5, 0.5))
    collocation = (8, 8, 8, 8)

    @classmethod
    def defaults(cls):
        return {"D": 0.1}

    def domain(self, u, alpha):
        return [(0.0, 1.0)] * 4

    def equations(self):
        D = self.constants["D"]

        def res(d, coords, u, alpha):
            return residual_heat3d(d[(0, 0, 0, 1)], d[(2, 0, 0, 0)], d[(0, 2, 0, 0)], d[(0, 0, 2, 0)], D)

        def jac(d, coords, u, alpha):
            return {(0, 0, 0, 1): 1.0, (2, 0, 0, 0): -D, (0, 2, 0, 0): -D, (0, 0, 2, 0): -D}

        eqs = [Equation("pde", ((0, 0, 0, 1), (2, 0, 0, 0), (0, 2, 0, 0), (0, 0, 2, 0)), res, jac)]
        for axis in (0, 1):
            o = _unit(4, axis)
            for side in ("first", "last"):
                eqs.append(Equation(
                    f"neumann_{self.axis_names[axis]}_{side}", (o,),
                    lambda d, c, u, a, o=o: neumann_residual(d[o]),
                    lambda d, c, u, a, o=o: {o: 1.0},
                    Region(axis, side),
                ))
        return eqs

    def pin_rules(self):
        return [PinRule(2, "first", 1.0), PinRule(2, "last", 1.0), PinRule(3, "first", "ic")]

    def initial_condition(self, u, alpha, x1, x2, x3):
        return alpha[1] * x1 + alpha[2] * x2 + alpha[3] * x3 + alpha[0]


class Burgers(PdeFamily):
    name = "burgers"
    axis_names = ("x", "t")
    u_names = ("u",)
    alpha_names = ("alpha",)
    u_range = ((0.5, 1.5),)
    alpha_range = ((2.0, 4.0),)
    collocation = (200, 160)

    @classmethod
    def defaults(cls):
        return {"nu": 0.01, "x_hi": 10.0, "t_hi": 8.0}

    def domain(self, u, alpha):
        return [(0.0, self.constants["x_hi"]), (0.0, self.constants["t_hi"])]

    def equations(self):
        nu = self.constants["nu"]

        def res(d, coords, u, alpha):
            return residual_burgers(d[(0, 0)], d[(0, 1)], d[(1, 0)], d[(2, 0)], u[0], nu)

        def jac(d, coords, u, alpha):
            return {(0, 0): u[0] * d[(1, 0)], (0, 1): 1.0, (1, 0): u[0] * d[(0, 0)], (2, 0): -nu}

        return [Equation("pde", ((0, 0), (0, 1), (1, 0), (2, 0)), res, jac)]

    def pin_rules(self):
        return [PinRule(1, "first", "ic")]

    def initial_condition(self, u, alpha, x):
        return np.exp(-((x - alpha[0]) ** 2) / 2.0)


class Advection(PdeFamily):
    name = "advection"
    axis_names = ("x", "t")
    u_names = ("u",)
    alpha_names = ("alpha",)
    u_range = ((0.5, 1.5),)
    alpha_range = ((0.0, 2.0 * np.pi),)
    collocation = (200, 200)

    @classmethod
    def defaults(cls):
        return {"form": "linear", "A": 1.0, "k": 2.0 * np.pi, "x_hi": 1.0, "t_hi": 2.0}

    def __init__(self, **constants):
        super().__init__(**constants)
        if self.constants["form"] not in ("linear", "nonlinear"):
            raise ValueError(f"unknown advection form {self.constants['form']!r}")

    def domain(self, u, alpha):
        return [(0.0, self.constants["x_hi"]), (0.0, self.constants["t_hi"])]

    def equations(self):
        form = self.constants["form"]

        def res(d, coords, u, alpha):
            return residual_advection(d[(0, 0)], d[(0, 1)], d[(1, 0)], u[0], form)

        def jac(d, coords, u, alpha):
            if form == "linear":
                return {(0, 1): 1.0, (1, 0): u[0]}
            return {(0, 0): u[0] * d[(1, 0)], (0, 1): 1.0, (1, 0): u[0] * d[(0, 0)]}

        return [Equation("pde", ((0, 0), (0, 1), (1, 0)), res, jac)]

    def pin_rules(self):
        return [PinRule(1, "first", "ic")]

    def initial_condition(self, u, alpha, x):
        c = self.constants
        return c["A"] * np.sin(c["k"] * x + alpha[0])

    def exact(self, u, alpha, x, t):
        if self.constants["form"] != "linear":
            return None
        c = self.constants
        return c["A"] * np.sin(c["k"] * (x - u[0] * t) + alpha[0])


class TrapezoidDiffusion(PdeFamily):
    """Exit probability from a trapezoid, learned on the mapped unit square.

    Axes ``xi``/``eta`` are the mapped coordinates ``(u, v)`` of the square.
    """

    name = "trapezoid_diffusion"
    axis_names = ("xi", "eta", "t")
    alpha_names = ("alpha",)
    alpha_range = ((0.0, 1.5),)
    collocation = (20, 20, 40)

    @classmethod
    def defaults(cls):
        return {"t_hi": 1.0}

    def domain(self, u, alpha):
        return [(0.0, 1.0), (0.0, 1.0), (0.0, self.constants["t_hi"])]

    def equations(self):
        def res(d, coords, u, alpha):
            return residual_trapezoid_mapped(d[(0, 0, 1)], d[(2, 0, 0)], d[(0, 2, 0)], alpha[0], coords[1])

        def jac(d, coords, u, alpha):
            return {(0, 0, 1): 1.0, (2, 0, 0): -0.5 / (2.0 - coords[1]) ** 2, (0, 2, 0): -0.5 * alpha[0]}

        return [Equation("pde", ((0, 0, 1), (2, 0, 0), (0, 2, 0)), res, jac)]

    def pin_rules(self):
        return [PinRule(0, "first", 1.0), PinRule(0, "last", 1.0),
                PinRule(1, "first", 1.0), PinRule(1, "last", 1.0),
                PinRule(2, "first", 0.0)]


FAMILIES: dict[str, type[PdeFamily]] = {
    cls.name: cls for cls in (ConvectionDiffusion, Heat3D, Burgers, Advection, TrapezoidDiffusion)
}
# Spelled-out aliases for the two advection forms.
ALIASES = {"advection_linear": ("advection", {"form": "linear"}),
           "advection_nonlinear": ("advection", {"form": "nonlinear"}),
           "recovery": ("convection_diffusion", {})}


def make_family(name: str, **constants) -> PdeFamily:
    if name in ALIASES:
        base, extra = ALIASES[name]
        return FAMILIES[base](**{**extra, **constants})
    try:
        return FAMILIES[name](**constants)
    except KeyError:
        raise ValueError(f"unknown PDE family {name!r}") from None


def family_from_dict(d: Mapping) -> PdeFamily:
    d = dict(d)
    return make_family(d.pop("name"), **d)
