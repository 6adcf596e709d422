"""Tensor-product spline fields over boxes in R^n.

Control tensors are plain ``numpy`` arrays of shape ``(count_0, ..., count_{n-1})``
stored row-major (axis 0 slowest).  Grid evaluation contracts the control
tensor with one basis matrix per axis, so a field on an ``N_0 x ... x N_{n-1}``
grid costs ``O(prod(N) * sum(count))`` instead of the naive nested sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .spline_core import BasisSpec, FloatArray, basis_matrix, eval_basis_derivative


class FitError(ValueError):
    """Least-squares design is rank deficient."""


@dataclass
class SplineField:
    axes: tuple[BasisSpec, ...]
    coeffs: FloatArray

    def __post_init__(self) -> None:
        self.axes = tuple(self.axes)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        shape = tuple(a.count for a in self.axes)
        if self.coeffs.shape != shape:
            raise ValueError(f"coefficient shape {self.coeffs.shape} does not match axes {shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("control tensor contains non-finite entries")

    @property
    def ndim(self) -> int:
        return len(self.axes)


@dataclass
class GridDataset:
    """Gridded samples of one solution, tagged with its parameters."""

    axis_names: tuple[str, ...]
    axis_points: tuple[FloatArray, ...]
    values: FloatArray
    u: FloatArray = field(default_factory=lambda: np.zeros(0))
    alpha: FloatArray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        self.axis_names = tuple(self.axis_names)
        self.axis_points = tuple(np.asarray(p, dtype=np.float64) for p in self.axis_points)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.u = np.atleast_1d(np.asarray(self.u, dtype=np.float64))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        if len(self.axis_names) != len(self.axis_points):
            raise ValueError("one name per axis is required")
        shape = tuple(len(p) for p in self.axis_points)
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def check_inside(self, axes: Sequence[BasisSpec]) -> None:
        for a, pts in zip(axes, self.axis_points):
            slack = 1e-12 * max(1.0, abs(a.lo), abs(a.hi))
            if pts.min() < a.lo - slack or pts.max() > a.hi + slack:
                raise ValueError(f"grid points leave the axis domain [{a.lo}, {a.hi}]")


def contract(coeffs: FloatArray, mats: Sequence[FloatArray], lead: int = 0) -> FloatArray:
    """Apply ``mats[k]`` along axis ``lead + k`` of ``coeffs``.

    ``mats[k]`` has shape ``(N_k, coeffs.shape[lead + k])``; the first
    ``lead`` axes are carried through as batch axes.  Passing transposed
    matrices gives the adjoint.
    """
    out = coeffs
    for k, m in enumerate(mats):
        ax = lead + k
        shp = out.shape
        pre, post = math.prod(shp[:ax]), math.prod(shp[ax + 1:])
        # matmul on a (pre, n, post) view avoids the transposes tensordot makes
        if post == 1:
            out = out.reshape(pre, shp[ax]) @ m.T
        else:
            out = np.matmul(m, out.reshape(pre, shp[ax], post))
        out = out.reshape(shp[:ax] + (m.shape[0],) + shp[ax + 1:])
    return out


def _check_point(field: SplineField, point: Sequence[float]) -> list[float]:
    pt = [float(v) for v in np.atleast_1d(point)]
    if len(pt) != field.ndim:
        raise ValueError(f"point has {len(pt)} coordinates, field has {field.ndim} axes")
    return pt


def _check_orders(field: SplineField, orders: Sequence[int] | None) -> tuple[int, ...]:
    if orders is None:
        return (0,) * field.ndim
    orders = tuple(int(p) for p in orders)
    if len(orders) != field.ndim:
        raise ValueError(f"need {field.ndim} derivative orders, got {len(orders)}")
    return orders


def eval_field_partial(field: SplineField, point: Sequence[float], orders: Sequence[int]) -> float:
    """Mixed partial derivative of the field at one point."""
    pt = _check_point(field, point)
    orders = _check_orders(field, orders)
    out = field.coeffs
    # Contract the last axis first so the remaining tensor stays contiguous.
    for k in reversed(range(field.ndim)):
        out = out @ eval_basis_derivative(field.axes[k], pt[k], orders[k])
    return float(out)


def eval_field(field: SplineField, point: Sequence[float]) -> float:
    return eval_field_partial(field, point, (0,) * field.ndim)


def basis_matrices(
    axes: Sequence[BasisSpec], grid: Sequence[Sequence[float]], orders: Sequence[int]
) -> list[FloatArray]:
    return [basis_matrix(a, g, p) for a, g, p in zip(axes, grid, orders)]


def eval_on_grid(
    field: SplineField,
    grid: Sequence[Sequence[float]],
    orders: Sequence[int] | None = None,
) -> FloatArray:
    """Field (or a mixed partial) on the tensor grid spanned by ``grid``."""
    if len(grid) != field.ndim:
        raise ValueError(f"grid has {len(grid)} axes, field has {field.ndim}")
    orders = _check_orders(field, orders)
    return contract(field.coeffs, basis_matrices(field.axes, grid, orders))


def _normal_factors(mats: Sequence[FloatArray]):
    factors = []
    for k, m in enumerate(mats):
        gram = m.T @ m
        try:
            cf = linalg.cho_factor(gram, lower=True, check_finite=True)
        except linalg.LinAlgError as exc:
            raise FitError(f"design along axis {k} is rank deficient") from exc
        # Cholesky can succeed on numerically singular Gram matrices.
        diag = np.diag(cf[0])
        if diag.min() <= 1e-10 * diag.max():
            raise FitError(f"design along axis {k} is rank deficient")
        factors.append(cf)
    return factors


def ls_fit_grid(
    axes: Sequence[BasisSpec], grid: Sequence[Sequence[float]], values: FloatArray
) -> FloatArray:
    """Least-squares control tensor for gridded samples.

    The design matrix of a tensor grid is the Kronecker product of the
    per-axis basis matrices, so its normal equations factor axis by axis:
    ``C = values x_k (M_k^T M_k)^{-1} M_k^T``.
    """
    values = np.asarray(values, dtype=np.float64)
    if len(axes) != len(grid) or values.ndim != len(axes):
        raise ValueError("axes, grid and values must share the same dimension")
    for a, g in zip(axes, grid):
        if len(np.unique(np.asarray(g))) < a.count:
            raise FitError(f"axis needs at least {a.count} distinct samples, got {len(np.unique(g))}")
    mats = basis_matrices(axes, grid, (0,) * len(axes))
    rhs = contract(values, [m.T for m in mats])
    for k, cf in enumerate(_normal_factors(mats)):
        moved = np.moveaxis(rhs, k, 0)
        solved = linalg.cho_solve(cf, moved.reshape(moved.shape[0], -1))
        rhs = np.moveaxis(solved.reshape(moved.shape), 0, k)
    return rhs


def ls_fit(axes: Sequence[BasisSpec], data: GridDataset) -> FloatArray:
    data.check_inside(axes)
    return ls_fit_grid(axes, data.axis_points, data.values)


def ls_residual_gradient(
    axes: Sequence[BasisSpec], grid: Sequence[Sequence[float]], values: FloatArray, coeffs: FloatArray
) -> FloatArray:
    """Gradient of ``0.5 * ||A c - y||^2`` with respect to the control tensor."""
    mats = basis_matrices(axes, grid, (0,) * len(axes))
    resid = contract(coeffs, mats) - values
    return contract(resid, [m.T for m in mats])


def convex_hull_bounds(field: SplineField) -> tuple[float, float]:
    return float(field.coeffs.min()), float(field.coeffs.max())
