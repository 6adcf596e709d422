"""Clamped univariate B-spline bases.

Knots follow the clamped-equispaced layout: ``order + 1`` repeated knots at
each end of ``[lo, hi]`` and equispaced interior knots.  ``order`` is the
polynomial degree of the basis, so a basis with ``count`` functions carries
``count + order + 1`` knots.

All evaluation routines are vectorised over the evaluation points and return
arrays of shape ``(n_points, count)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from math import comb, factorial

import numpy as np
import numpy.typing as npt

ArrayLike = npt.ArrayLike
FloatArray = npt.NDArray[np.float64]

# Relative slack when testing whether a point sits inside [lo, hi].
_DOMAIN_RTOL = 1e-12


class SplineError(ValueError):
    """Base class for spline construction and evaluation errors."""


class InvalidSpecError(SplineError):
    pass


class OutOfDomainError(SplineError):
    pass


class InvalidOrderError(SplineError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    """One axis of a clamped B-spline basis."""

    lo: float
    hi: float
    order: int
    count: int

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or not self.lo < self.hi:
            raise InvalidSpecError(f"need finite lo < hi, got [{self.lo}, {self.hi}]")
        if int(self.order) != self.order or self.order < 1:
            raise InvalidSpecError(f"order must be a positive integer, got {self.order}")
        if int(self.count) != self.count or self.count < self.order + 1:
            raise InvalidSpecError(
                f"count must be at least order + 1 = {self.order + 1}, got {self.count}"
            )

    @cached_property
    def knots(self) -> FloatArray:
        return make_clamped_knots(self)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def with_domain(self, lo: float, hi: float) -> BasisSpec:
        return BasisSpec(float(lo), float(hi), self.order, self.count)


def make_clamped_knots(spec: BasisSpec) -> FloatArray:
    """Clamped knot vector with equispaced interior knots.

    >>> make_clamped_knots(BasisSpec(0.0, 3.0, 3, 6)).tolist()
    [0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 3.0, 3.0, 3.0]
    """
    d, n = spec.order, spec.count
    if n < d + 1:
        raise InvalidSpecError(f"count must be at least order + 1 = {d + 1}, got {n}")
    step = (spec.hi - spec.lo) / (n - d)
    interior = spec.lo + step * np.arange(1, n - d)
    knots = np.concatenate([np.full(d + 1, spec.lo), interior, np.full(d + 1, spec.hi)])
    # Pin the ends exactly; interior values come from lo + k * step.
    knots[: d + 1] = spec.lo
    knots[-(d + 1):] = spec.hi
    return knots


def _as_points(spec: BasisSpec, x: ArrayLike) -> FloatArray:
    pts = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if pts.ndim != 1:
        raise ValueError("evaluation points must be a scalar or a 1-D array")
    slack = _DOMAIN_RTOL * max(1.0, abs(spec.lo), abs(spec.hi))
    bad = ~((pts >= spec.lo - slack) & (pts <= spec.hi + slack))
    if np.any(bad):
        raise OutOfDomainError(
            f"point {pts[bad][0]!r} outside basis domain [{spec.lo}, {spec.hi}]"
        )
    return np.clip(pts, spec.lo, spec.hi)


def _all_bases(knots: FloatArray, x: FloatArray, degree: int, last_span: int) -> FloatArray:
    """Cox-de Boor recursion for every degree-``degree`` basis on ``knots``.

    Returns ``(len(x), len(knots) - 1 - degree)``.  Terms with a zero knot
    difference are dropped (0/0 := 0).  Points at the right end of the domain
    are assigned to the last non-empty knot interval ``last_span``.
    """
    t = knots
    m = len(t)
    span = np.searchsorted(t, x, side="right") - 1
    span = np.minimum(span, last_span)
    B = np.zeros((len(x), m - 1))
    B[np.arange(len(x)), span] = 1.0
    for k in range(1, degree + 1):
        i = np.arange(m - 1 - k)
        den1 = t[i + k] - t[i]
        den2 = t[i + k + 1] - t[i + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            w1 = np.where(den1 > 0, (x[:, None] - t[i]) / den1, 0.0)
            w2 = np.where(den2 > 0, (t[i + k + 1] - x[:, None]) / den2, 0.0)
        B = w1 * B[:, :-1] + w2 * B[:, 1:]
    return B


def basis_matrix(spec: BasisSpec, x: ArrayLike, p: int = 0) -> FloatArray:
    """Values of the ``p``-th derivative of every basis function at ``x``.

    The derivative is obtained by applying the one-step recurrence
    ``B'_{i,k} = k (B_{i,k-1} / (t_{i+k} - t_i) - B_{i+1,k-1} / (t_{i+k+1} - t_{i+1}))``
    ``p`` times, starting from the degree ``order - p`` bases.
    """
    d = spec.order
    if int(p) != p or p < 0:
        raise InvalidOrderError(f"derivative order must be a non-negative integer, got {p}")
    if p > d:
        raise InvalidOrderError(f"derivative order {p} exceeds basis order {d}")
    pts = _as_points(spec, x)
    t = spec.knots
    V = _all_bases(t, pts, d - p, last_span=spec.count - 1)
    for k in range(d - p + 1, d + 1):
        i = np.arange(V.shape[1] - 1)
        den1 = t[i + k] - t[i]
        den2 = t[i + k + 1] - t[i + 1]
        with np.errstate(divide="ignore"):
            a = np.where(den1 > 0, k / np.where(den1 > 0, den1, 1.0), 0.0)
            b = np.where(den2 > 0, k / np.where(den2 > 0, den2, 1.0), 0.0)
        V = a * V[:, :-1] - b * V[:, 1:]
    return V


def eval_basis(spec: BasisSpec, x: float) -> FloatArray:
    """All ``count`` basis values at a single point."""
    return basis_matrix(spec, x, 0)[0]


def eval_basis_derivative(spec: BasisSpec, x: float, p: int) -> FloatArray:
    """All ``count`` basis ``p``-th derivatives at a single point."""
    return basis_matrix(spec, x, p)[0]


def _uniform_window(spec: BasisSpec, i: int, p: int) -> bool:
    # The product form touches knots t[i] .. t[i + order + p].
    t = spec.knots
    stop = i + spec.order + p + 1
    if stop > len(t):
        return False
    gaps = np.diff(t[i:stop])
    return bool(np.all(gaps > 0) and np.allclose(gaps, gaps[0], rtol=1e-12, atol=0.0))


def closed_form_derivative(spec: BasisSpec, x: ArrayLike, p: int) -> FloatArray:
    """Binomial closed form for basis derivatives, used as a cross-check.

    With ``q = order + 1`` (the spline order in the "number of coefficients"
    sense) the ``p``-th derivative of basis ``i`` is

        (q-1)!/(q-p-1)! * sum_k (-1)^k C(p, k) B_{i+k, order-p}(x)
                                / prod_{j<p} (t_{i+k+q-1-j} - t_{i+k})

    This product form is exact only when the support of basis ``i`` spans
    equal, non-degenerate knot intervals over ``t[i] .. t[i + order + p]``;
    entries for bases near the clamped ends are returned as NaN.
    """
    d = spec.order
    if p > d or p < 0:
        raise InvalidOrderError(f"derivative order {p} invalid for basis order {d}")
    pts = _as_points(spec, x)
    t = spec.knots
    q = d + 1
    low = _all_bases(t, pts, d - p, last_span=spec.count - 1)
    scale = factorial(q - 1) / factorial(q - p - 1)
    out = np.full((len(pts), spec.count), np.nan)
    for i in range(spec.count):
        if not _uniform_window(spec, i, p):
            continue
        acc = np.zeros(len(pts))
        for k in range(p + 1):
            den = 1.0
            for j in range(p):
                den *= t[i + k + q - 1 - j] - t[i + k]
            acc += (-1) ** k * comb(p, k) * low[:, i + k] / den
        out[:, i] = scale * acc
    return out
