"""Deep B-spline network: coefficient MLP -> pinned control tensor -> field.

The loss gradient is exact.  Residuals are differentiated with respect to
the derivative fields (the family supplies those partials), pulled back to
the control tensor through the adjoint of the basis contraction, restricted
to the free entries, and finally pushed through the MLP backward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .coeff_net import AdamState, MlpParams, MlpSpec, adam_step, backward, forward, init_params
from .physics import Equation, PdeFamily, PinRule
from .spline_core import BasisSpec, basis_matrix
from .tensor_field import GridDataset, SplineField, contract, eval_field, eval_on_grid, ls_fit_grid

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    pass


# ----------------------------------------------------------------------------
# Pinning
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PinningPlan:
    """Ordered pin rules; earlier rules take precedence on shared entries."""

    rules: tuple[PinRule, ...] = ()

    def owners(self, shape: Sequence[int]) -> np.ndarray:
        """Index of the governing rule for every entry, -1 where free."""
        owner = np.full(tuple(shape), -1, dtype=np.int64)
        for idx in reversed(range(len(self.rules))):
            r = self.rules[idx]
            sl = [slice(None)] * len(shape)
            sl[r.axis] = 0 if r.side == "first" else -1
            owner[tuple(sl)] = idx
        return owner

    def free_mask(self, shape: Sequence[int]) -> np.ndarray:
        return self.owners(shape) < 0

    def to_list(self) -> list[dict]:
        return [{"axis": r.axis, "side": r.side, "value": r.value} for r in self.rules]

    @classmethod
    def from_list(cls, items) -> PinningPlan:
        return cls(tuple(PinRule(int(d["axis"]), d["side"], d["value"]) for d in items))


def _ic_fit_grid(bases: Sequence[BasisSpec], n_min: int = 21) -> list[np.ndarray]:
    return [np.linspace(b.lo, b.hi, max(4 * b.count + 1, n_min)) for b in bases]


# ----------------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------------

@dataclass
class DbsnModel:
    family: PdeFamily
    counts: tuple[int, ...]
    orders: tuple[int, ...]
    spec: MlpSpec
    params: MlpParams
    pinning: PinningPlan
    seed: int = 0
    _ic_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.counts = tuple(int(c) for c in self.counts)
        self.orders = tuple(int(o) for o in self.orders)
        if len(self.counts) != self.family.ndim or len(self.orders) != self.family.ndim:
            raise ConfigError(f"{self.family.name} needs {self.family.ndim} axes")
        n_free = int(self.free_mask.sum())
        if self.spec.output_dim != n_free:
            raise ConfigError(f"network emits {self.spec.output_dim} values, {n_free} entries are free")
        if self.spec.input_dim != max(1, sum(self.family.param_dims)):
            raise ConfigError("network input width does not match the family parameters")

    @classmethod
    def create(cls, family: PdeFamily, counts: Sequence[int], orders: Sequence[int] | int,
               hidden: Sequence[int] = (64, 64, 64), activation: str = "relu", residual: bool = False,
               seed: int = 0, pinning: PinningPlan | None = None) -> DbsnModel:
        counts = tuple(int(c) for c in counts)
        if isinstance(orders, (int, np.integer)):
            orders = (int(orders),) * len(counts)
        pinning = pinning if pinning is not None else PinningPlan(tuple(family.pin_rules()))
        n_free = int(pinning.free_mask(counts).sum())
        spec = MlpSpec(max(1, sum(family.param_dims)), tuple(hidden), n_free, activation, residual)
        return cls(family, counts, tuple(orders), spec, init_params(spec, seed), pinning, seed)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    @property
    def free_mask(self) -> np.ndarray:
        return self.pinning.free_mask(self.counts)

    def with_params(self, params: MlpParams) -> DbsnModel:
        return replace(self, params=params, _ic_cache=self._ic_cache)

    def bases(self, u, alpha) -> list[BasisSpec]:
        dom = self.family.domain(np.atleast_1d(u), np.atleast_1d(alpha))
        return [BasisSpec(float(lo), float(hi), o, c) for (lo, hi), o, c in zip(dom, self.orders, self.counts)]

    def net_input(self, u, alpha) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
        nu, na = self.family.param_dims
        if u.size != nu or alpha.size != na:
            raise ValueError(f"{self.family.name} takes {nu} system and {na} ICBC parameters")
        raw = np.concatenate([u, alpha])
        ranges = (*self.family.u_range, *self.family.alpha_range)
        if not ranges:
            return np.zeros(1)
        lo = np.array([r[0] for r in ranges])
        hi = np.array([r[1] for r in ranges])
        span = np.where(hi > lo, hi - lo, 1.0)
        return np.where(hi > lo, 2.0 * (raw - lo) / span - 1.0, 0.0)

    def pinned_values(self, u, alpha) -> np.ndarray:
        """Control tensor holding pinned values, zeros at free entries."""
        key = (tuple(np.atleast_1d(u).tolist()), tuple(np.atleast_1d(alpha).tolist()))
        if key in self._ic_cache:
            return self._ic_cache[key]
        base = np.zeros(self.counts)
        bases = self.bases(u, alpha)
        for idx in reversed(range(len(self.pinning.rules))):
            r = self.pinning.rules[idx]
            sl = [slice(None)] * len(self.counts)
            sl[r.axis] = 0 if r.side == "first" else -1
            if r.value == "ic":
                other = [b for k, b in enumerate(bases) if k != r.axis]
                grid = _ic_fit_grid(other)
                mesh = np.meshgrid(*grid, indexing="ij", sparse=True)
                vals = np.broadcast_to(
                    self.family.initial_condition(np.atleast_1d(u), np.atleast_1d(alpha), *mesh),
                    tuple(len(g) for g in grid))
                base[tuple(sl)] = ls_fit_grid(other, grid, vals)
            else:
                base[tuple(sl)] = float(r.value)
        self._ic_cache[key] = base
        return base

    def scatter(self, out: np.ndarray, u, alpha) -> np.ndarray:
        C = self.pinned_values(u, alpha).copy()
        C[self.free_mask] = out
        return C

    def predict_control_tensor(self, u, alpha) -> np.ndarray:
        out, _ = forward(self.spec, self.params, self.net_input(u, alpha))
        return self.scatter(out, u, alpha)

    def field(self, u, alpha) -> SplineField:
        return SplineField(self.bases(u, alpha), self.predict_control_tensor(u, alpha))

    def predict(self, u, alpha, point: Sequence[float]) -> float:
        return eval_field(self.field(u, alpha), point)

    def predict_grid(self, u, alpha, grid, orders=None) -> np.ndarray:
        return eval_on_grid(self.field(u, alpha), grid, orders)


# ----------------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 2000
    w_p: float = 1.0
    w_d: float = 1.0
    lr: float = 1e-3
    lr_decay: float = 1.0  # multiply lr by this every ``lr_decay_every`` epochs
    lr_decay_every: int = 1000
    seed: int = 0
    collocation: tuple[int, ...] | None = None
    resample: bool = False
    train_params: list = field(default_factory=list)  # [(u, alpha), ...]
    # Extra (u, alpha) draws from the family ranges that only enter the physics loss.
    physics_samples: int = 0
    log_every: int = 0

    def __post_init__(self) -> None:
        if self.w_p < 0 or self.w_d < 0 or (self.w_p == 0 and self.w_d == 0):
            raise ConfigError("loss weights must be non-negative and not both zero")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.physics_samples < 0:
            raise ConfigError("physics_samples must be non-negative")
        if self.collocation is not None:
            self.collocation = tuple(int(n) for n in self.collocation)


@dataclass
class _EqCache:
    eq: Equation
    coords: list[np.ndarray]
    shape: tuple[int, ...]
    mats: dict  # orders -> per-axis matrices
    n_points: int


@dataclass
class _Sample:
    u: np.ndarray
    alpha: np.ndarray
    x_in: np.ndarray
    base: np.ndarray
    eqs: list[_EqCache]
    data_mats: list[np.ndarray] | None
    data_values: np.ndarray | None


@dataclass
class _Group:
    """Samples sharing collocation operators and data grid, batched on axis 0."""

    members: np.ndarray
    eqs: list[_EqCache]
    u: np.ndarray  # (n_u, B, 1, ..., 1) so ``u[k]`` broadcasts against fields
    alpha: np.ndarray
    data_mats: list[np.ndarray] | None
    data_values: np.ndarray | None


def _axis_mats(bases, grid, orders_list):
    cache = {}
    out = {}
    for orders in orders_list:
        mats = []
        for k, (b, g, p) in enumerate(zip(bases, grid, orders)):
            key = (k, p)
            if key not in cache:
                # Derivatives beyond the polynomial degree vanish between knots.
                cache[key] = basis_matrix(b, g, p) if p <= b.order else np.zeros((len(g), b.count))
            mats.append(cache[key])
        out[orders] = mats
    return out


def _batch_params(values: Sequence[np.ndarray], ndim: int) -> np.ndarray:
    stacked = np.stack(values, axis=1) if values[0].size else np.zeros((0, len(values)))
    return stacked.reshape(stacked.shape + (1,) * ndim)


class LossProblem:
    """Precomputed collocation and data operators for a fixed sample set."""

    def __init__(self, model: DbsnModel, config: TrainConfig, data: Sequence[GridDataset] | None = None):
        self.model = model
        self.config = config
        self.family = model.family
        data = list(data or [])
        params = list(config.train_params)
        if not params:
            params = [(d.u, d.alpha) for d in data]
        if not params:
            raise ConfigError("no training parameters")
        if data and len(data) != len(params):
            raise ConfigError("data sets must align one-to-one with training parameters")
        if config.w_d > 0 and not data:
            raise ConfigError("data loss weight is positive but no data was given")
        self.collocation = config.collocation or self.family.collocation
        if config.w_p > 0 and (not self.collocation or min(self.collocation) < 1):
            raise ConfigError("physics loss needs a non-empty collocation set")
        self._rng = np.random.default_rng(config.seed)
        self._params = [(np.atleast_1d(np.asarray(u, float)), np.atleast_1d(np.asarray(a, float))) for u, a in params]
        self._data = data
        self._n_data = len(self._params) if data and config.w_d > 0 else 0
        self.samples, self.groups = self._build(randomize=False)
        self.free = model.free_mask

    def _draw_physics_params(self) -> list[tuple[np.ndarray, np.ndarray]]:
        fam = self.family
        out = []
        for _ in range(self.config.physics_samples if self.config.w_p > 0 else 0):
            u = np.array([self._rng.uniform(lo, hi) for lo, hi in fam.u_range])
            a = np.array([self._rng.uniform(lo, hi) for lo, hi in fam.alpha_range])
            out.append((u, a))
        return out

    def _build(self, randomize: bool) -> tuple[list[_Sample], list[_Group]]:
        samples = []
        shared = {}  # key -> (eq caches, data matrices, member indices)
        eqs = self.family.equations() if self.config.w_p > 0 else []
        for i, (u, alpha) in enumerate(self._params + self._draw_physics_params()):
            bases = self.model.bases(u, alpha)
            d = self._data[i] if i < self._n_data else None
            key = (tuple((b.lo, b.hi) for b in bases),
                   None if d is None else tuple(p.tobytes() for p in d.axis_points),
                   i if randomize else None)
            if key not in shared:
                bounds = [(b.lo, b.hi) for b in bases]
                caches = []
                for eq in eqs:
                    grid = eq.region.grid(bounds, self.collocation, self._rng if randomize else None)
                    coords = np.meshgrid(*grid, indexing="ij", sparse=True)
                    shape = tuple(len(g) for g in grid)
                    caches.append(_EqCache(eq, coords, shape, _axis_mats(bases, grid, eq.orders),
                                           int(np.prod(shape))))
                dm = None
                if d is not None:
                    d.check_inside(bases)
                    dm = [basis_matrix(b, g, 0) for b, g in zip(bases, d.axis_points)]
                shared[key] = (caches, dm, [])
            caches, dm, members = shared[key]
            members.append(i)
            samples.append(_Sample(u, alpha, self.model.net_input(u, alpha), self.model.pinned_values(u, alpha),
                                   caches, dm, None if d is None else d.values))
        ndim = self.family.ndim
        groups = []
        for caches, dm, members in shared.values():
            ss = [samples[i] for i in members]
            groups.append(_Group(np.array(members), caches,
                                 _batch_params([s.u for s in ss], ndim), _batch_params([s.alpha for s in ss], ndim),
                                 dm, None if dm is None else np.stack([s.data_values for s in ss])))
        return samples, groups

    def resample(self) -> None:
        self.samples, self.groups = self._build(randomize=True)

    def _batch_grads(self, C: np.ndarray, eqs: list[_EqCache], u: np.ndarray, alpha: np.ndarray,
                     data_mats, data_values) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Physics and data losses per sample and their weighted gradients in C.

        ``C`` carries the samples on axis 0.
        """
        cfg = self.config
        B = C.shape[0]
        G_p = np.zeros_like(C)
        lp = np.zeros(B)
        for ec in eqs:
            full = (B,) + ec.shape
            derivs = {o: contract(C, m, lead=1) for o, m in ec.mats.items()}
            R = np.broadcast_to(ec.eq.residual(derivs, ec.coords, u, alpha), full)
            lp += np.mean((R * R).reshape(B, -1), axis=1)
            for o, j in ec.eq.jacobian(derivs, ec.coords, u, alpha).items():
                g = (2.0 * cfg.w_p / ec.n_points) * R * j
                G_p += contract(np.broadcast_to(g, full), [m.T for m in ec.mats[o]], lead=1)
        ld = np.zeros(B)
        G_d = np.zeros_like(C)
        if data_mats is not None:
            E = contract(C, data_mats, lead=1) - data_values
            ld = np.mean((E * E).reshape(B, -1), axis=1)
            G_d = contract((2.0 * cfg.w_d / E[0].size) * E, [m.T for m in data_mats], lead=1)
        return lp, ld, G_p, G_d

    def control_grads(self, C: np.ndarray, s: _Sample) -> tuple[float, float, np.ndarray, np.ndarray]:
        """Per-sample physics loss, data loss and their weighted gradients in C."""
        ndim = self.family.ndim
        lp, ld, G_p, G_d = self._batch_grads(
            C[None], s.eqs, _batch_params([s.u], ndim), _batch_params([s.alpha], ndim), s.data_mats,
            None if s.data_values is None else s.data_values[None])
        return float(lp[0]), float(ld[0]), G_p[0], G_d[0]

    def loss_and_grad(self, params: MlpParams):
        model = self.model
        X = np.stack([s.x_in for s in self.samples])
        out, tape = forward(model.spec, params, X)
        n = len(self.samples)
        n_d = max(self._n_data, 1)
        C = np.stack([s.base for s in self.samples])
        C[:, self.free] = out
        g_out = np.empty_like(out)
        lp_tot = ld_tot = 0.0
        for g in self.groups:
            lp, ld, G_p, G_d = self._batch_grads(C[g.members], g.eqs, g.u, g.alpha, g.data_mats, g.data_values)
            lp_tot += float(lp.sum())
            ld_tot += float(ld.sum())
            g_out[g.members] = G_p[:, self.free] / n + G_d[:, self.free] / n_d
        L_p, L_d = lp_tot / n, ld_tot / n_d
        loss = self.config.w_p * L_p + self.config.w_d * L_d
        return loss, backward(params, tape, g_out), (L_p, L_d)

    def loss(self, params: MlpParams) -> float:
        return self.loss_and_grad(params)[0]


def total_loss_and_grad(model: DbsnModel, family: PdeFamily, config: TrainConfig,
                        data: Sequence[GridDataset] | None = None):
    if family is not model.family and family.to_dict() != model.family.to_dict():
        raise ConfigError("model was built for a different PDE family")
    return LossProblem(model, config, data).loss_and_grad(model.params)


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    physics: list[float] = field(default_factory=list)
    data: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss)


def train(model: DbsnModel, family: PdeFamily, config: TrainConfig, data: Sequence[GridDataset] | None = None,
          callback: Callable[[int, float], None] | None = None) -> tuple[DbsnModel, History]:
    """Full-batch Adam over the training parameter set."""
    history = History()
    if config.epochs == 0:
        return model, history
    if family is not model.family and family.to_dict() != model.family.to_dict():
        raise ConfigError("model was built for a different PDE family")
    problem = LossProblem(model, config, data)
    params = model.params.copy()
    state = AdamState.for_params(params, config.lr)
    for epoch in range(config.epochs):
        if config.resample and epoch > 0:
            problem.resample()
        if epoch > 0 and config.lr_decay != 1.0 and epoch % config.lr_decay_every == 0:
            state.lr *= config.lr_decay
        loss, grads, (lp, ld) = problem.loss_and_grad(params)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch} (L_p={lp}, L_d={ld})")
        history.loss.append(loss)
        history.physics.append(lp)
        history.data.append(ld)
        if config.log_every and epoch % config.log_every == 0:
            log.info("epoch %d loss %.4e (physics %.4e, data %.4e)", epoch, loss, lp, ld)
        if callback is not None:
            callback(epoch, loss)
        params, state = adam_step(params, grads, state)
    return model.with_params(params), history


# ----------------------------------------------------------------------------
# Evaluation helpers
# ----------------------------------------------------------------------------

def dataset_mse(model: DbsnModel, data: GridDataset) -> float:
    pred = model.predict_grid(data.u, data.alpha, data.axis_points)
    return float(np.mean((pred - data.values) ** 2))


def mean_abs_residual(model: DbsnModel, u, alpha, counts: Sequence[int] | None = None,
                      equation: str = "pde") -> float:
    """Mean |residual| of one equation on a cell-centred collocation grid."""
    fam = model.family
    counts = counts or fam.collocation
    field_ = model.field(u, alpha)
    bounds = [(b.lo, b.hi) for b in field_.axes]
    for eq in fam.equations():
        if eq.name != equation:
            continue
        grid = eq.region.grid(bounds, counts)
        coords = np.meshgrid(*grid, indexing="ij", sparse=True)
        derivs = {o: eval_on_grid(field_, grid, o) for o in eq.orders}
        R = eq.residual(derivs, coords, np.atleast_1d(u), np.atleast_1d(alpha))
        return float(np.mean(np.abs(np.broadcast_to(R, tuple(len(g) for g in grid)))))
    raise ValueError(f"{fam.name} has no equation named {equation!r}")


def icbc_violation(model: DbsnModel, u, alpha, n: int = 101) -> dict:
    """Worst deviation of the field from its pinned data, face by face.

    Faces are sampled on ``n`` points per free axis.  ``*_max`` skips only the
    edges shared with a higher-precedence face.  ``*_clear_max`` also skips
    the outermost knot span next to such a face, where the other face's
    pinned control slice still contributes (a continuous spline cannot jump
    at a corner where the two conditions disagree).
    """
    field_ = model.field(u, alpha)
    u = np.atleast_1d(u)
    alpha = np.atleast_1d(alpha)
    out = {"constant_max": 0.0, "constant_clear_max": 0.0, "ic_fit_max": 0.0, "ic_fit_clear_max": 0.0}
    rules = model.pinning.rules
    for pos, r in enumerate(rules):
        grid = [np.linspace(b.lo, b.hi, n) for b in field_.axes]
        b = field_.axes[r.axis]
        grid[r.axis] = np.array([b.lo if r.side == "first" else b.hi])
        pred = eval_on_grid(field_, grid)
        if r.value == "ic":
            others = [g for k, g in enumerate(grid) if k != r.axis]
            mesh = np.meshgrid(*others, indexing="ij", sparse=True)
            target = np.broadcast_to(model.family.initial_condition(u, alpha, *mesh), tuple(map(len, others)))
            target = np.expand_dims(target, r.axis)
            key = "ic_fit"
        else:
            target = float(r.value)
            key = "constant"
        err = np.abs(pred - target)
        edge = np.zeros(pred.shape, dtype=bool)
        near = np.zeros(pred.shape, dtype=bool)
        for other in rules[:pos]:
            if other.axis == r.axis:
                continue
            ob = field_.axes[other.axis]
            g = grid[other.axis]
            knots = ob.knots
            if other.side == "first":
                on, span = g == ob.lo, g < knots[ob.order + 1]
            else:
                on, span = g == ob.hi, g > knots[ob.count - 1]
            shape = [1] * pred.ndim
            shape[other.axis] = -1
            edge |= on.reshape(shape)
            near |= span.reshape(shape)
        if (~edge).any():
            out[f"{key}_max"] = max(out[f"{key}_max"], float(err[~edge].max()))
        if (~near).any():
            out[f"{key}_clear_max"] = max(out[f"{key}_clear_max"], float(err[~near].max()))
    return out
