"""Experiment configuration, dataset and checkpoint files, reports.

Config files are YAML.  Datasets are long-format CSV (one row per grid
node).  A checkpoint is a single file: a magic line, the byte length of a
JSON header, the header, then the flat network weights as little-endian
float64.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .coeff_net import MlpSpec, init_params
from .dbsn import ConfigError, DbsnModel, PinningPlan, TrainConfig
from .physics import PdeFamily, family_from_dict
from .tensor_field import GridDataset

MAGIC = b"PIDBSN-CHECKPOINT 1\n"

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"train_params", "seed"}
_NET_DEFAULT = {"hidden": [64, 64, 64], "activation": "relu", "residual": False}


# ----------------------------------------------------------------------------
# Parameter sets
# ----------------------------------------------------------------------------

def resolve_params(family: PdeFamily, spec: dict, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Expand a parameter-set spec into ``(u, alpha)`` pairs.

    ``{"grid": [n, ...]}`` takes ``n`` equispaced values per parameter over
    the family ranges (one value means the midpoint), ``{"random": n,
    "seed": s}`` draws uniformly and ``{"values": [[u..., alpha...], ...]}``
    lists them explicitly.
    """
    nu, na = family.param_dims
    ranges = (*family.u_range, *family.alpha_range)
    if not isinstance(spec, dict) or len(spec.keys() - {"seed"}) != 1:
        raise ConfigError(f"parameter set needs exactly one of grid/random/values, got {spec!r}")
    if "grid" in spec:
        counts = list(spec["grid"])
        if len(counts) != len(ranges) or any(int(n) < 1 for n in counts):
            raise ConfigError(f"grid needs {len(ranges)} positive counts")
        axes = [np.linspace(lo, hi, int(n)) if int(n) > 1 else np.array([(lo + hi) / 2])
                for (lo, hi), n in zip(ranges, counts)]
        rows = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1) if axes else np.zeros((1, 0))
    elif "random" in spec:
        rng = np.random.default_rng(spec.get("seed", seed))
        n = int(spec["random"])
        if n < 1:
            raise ConfigError("random parameter set needs a positive count")
        rows = np.array([[rng.uniform(lo, hi) for lo, hi in ranges] for _ in range(n)]).reshape(n, len(ranges))
    elif "values" in spec:
        rows = np.array(spec["values"], dtype=np.float64).reshape(-1, len(ranges))
        if rows.size == 0 and len(ranges):
            raise ConfigError("empty parameter list")
    else:
        raise ConfigError(f"unknown parameter-set kind {sorted(spec)}")
    return [(r[:nu].copy(), r[nu:nu + na].copy()) for r in rows]


# ----------------------------------------------------------------------------
# Experiment config
# ----------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    family: dict
    counts: list[int]
    orders: list[int]
    net: dict = field(default_factory=lambda: dict(_NET_DEFAULT))
    train: dict = field(default_factory=dict)
    train_params: dict = field(default_factory=lambda: {"random": 8})
    test_params: dict = field(default_factory=lambda: {"random": 4, "seed": 123})
    oracle: dict = field(default_factory=dict)
    data_dir: str | None = None
    out: str = "runs/default"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("family", "counts", "orders"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        d = dict(d)
        fam = d["family"]
        d["family"] = {"name": fam} if isinstance(fam, str) else dict(fam)
        family = cls._family(d["family"])
        d["family"] = family.to_dict()
        counts = d["counts"]
        counts = [counts] * family.ndim if isinstance(counts, int) else list(counts)
        orders = d["orders"]
        orders = [orders] * family.ndim if isinstance(orders, int) else list(orders)
        if len(counts) != family.ndim or len(orders) != family.ndim:
            raise ConfigError(f"{family.name} needs {family.ndim} counts and orders")
        d["counts"] = [int(c) for c in counts]
        d["orders"] = [int(o) for o in orders]
        d["net"] = {**_NET_DEFAULT, **dict(d.get("net") or {})}
        d["net"]["hidden"] = [int(h) for h in d["net"]["hidden"]]
        if set(d["net"]) - set(_NET_DEFAULT):
            raise ConfigError(f"unknown net keys: {sorted(set(d['net']) - set(_NET_DEFAULT))}")
        d["train"] = dict(d.get("train") or {})
        bad = set(d["train"]) - _TRAIN_KEYS
        if bad:
            raise ConfigError(f"unknown train keys: {sorted(bad)}")
        if "collocation" in d["train"] and d["train"]["collocation"] is not None:
            d["train"]["collocation"] = [int(n) for n in d["train"]["collocation"]]
        d["oracle"] = dict(d.get("oracle") or {})
        d["seed"] = int(d.get("seed", 0))
        cfg = cls(**d)
        cfg.train_config()  # validates weights and epochs
        resolve_params(family, cfg.train_params, cfg.seed)
        resolve_params(family, cfg.test_params, cfg.seed)
        return cfg

    @staticmethod
    def _family(d: dict) -> PdeFamily:
        try:
            return family_from_dict(d)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad family section: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(yaml.safe_load(text))
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    # -- resolution ---------------------------------------------------------

    def make_family(self) -> PdeFamily:
        return self._family(self.family)

    def build_model(self) -> DbsnModel:
        net = self.net
        return DbsnModel.create(self.make_family(), self.counts, self.orders, hidden=net["hidden"],
                                activation=net["activation"], residual=bool(net["residual"]), seed=self.seed)

    def train_config(self, params: Sequence | None = None) -> TrainConfig:
        kw = dict(self.train)
        if kw.get("collocation") is not None:
            kw["collocation"] = tuple(kw["collocation"])
        return TrainConfig(**kw, seed=self.seed, train_params=list(params or []))

    def params(self, split: str) -> list[tuple[np.ndarray, np.ndarray]]:
        spec = self.train_params if split == "train" else self.test_params
        return resolve_params(self.make_family(), spec, self.seed)

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.out) / "data"


# ----------------------------------------------------------------------------
# Hashing and JSON
# ----------------------------------------------------------------------------

def blob_sha1(data: bytes) -> str:
    """Content hash computed the way git hashes a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_sha1(path: str | Path) -> str:
    return blob_sha1(Path(path).read_bytes())


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# Datasets
# ----------------------------------------------------------------------------

def _param_columns(prefix: str, values: np.ndarray) -> list[str]:
    return [prefix] if values.size == 1 else [f"{prefix}{i}" for i in range(values.size)]


def save_dataset(path: str | Path, data: GridDataset) -> None:
    """Long-format CSV: axis columns, parameter columns, then ``value``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mesh = np.meshgrid(*data.axis_points, indexing="ij")
    cols = [m.ravel() for m in mesh]
    n = cols[0].size if cols else 1
    cols += [np.full(n, v) for v in data.u] + [np.full(n, v) for v in data.alpha]
    cols.append(data.values.ravel())
    header = [*data.axis_names, *_param_columns("u", data.u), *_param_columns("alpha", data.alpha), "value"]
    np.savetxt(path, np.column_stack(cols), delimiter=",", fmt="%.17g", header=",".join(header), comments="")


def load_dataset(path: str | Path, axis_names: Sequence[str] | None = None) -> GridDataset:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            header = next(csv.reader(fh))
    except (OSError, StopIteration) as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != len(header) or header[-1] != "value":
        raise ConfigError(f"{path}: malformed dataset header {header}")
    is_param = [h == "u" or h == "alpha" or (h[:1] == "u" and h[1:].isdigit())
                or (h.startswith("alpha") and h[5:].isdigit()) for h in header[:-1]]
    n_axes = is_param.index(True) if any(is_param) else len(header) - 1
    names = tuple(header[:n_axes])
    if axis_names is not None and tuple(axis_names) != names:
        raise ConfigError(f"{path}: axes {names} do not match {tuple(axis_names)}")
    axes = [np.unique(table[:, k]) for k in range(n_axes)]
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != table.shape[0]:
        raise ConfigError(f"{path}: rows do not form a full grid")
    idx = tuple(np.searchsorted(a, table[:, k]) for k, a in enumerate(axes))
    values = np.full(shape, np.nan)
    values[idx] = table[:, -1]
    if np.isnan(values).any():
        raise ConfigError(f"{path}: duplicate grid nodes")
    u = [table[0, k] for k, h in enumerate(header[:-1]) if k >= n_axes and h.startswith("u")]
    alpha = [table[0, k] for k, h in enumerate(header[:-1]) if k >= n_axes and h.startswith("alpha")]
    return GridDataset(names, axes, values, u=np.array(u), alpha=np.array(alpha))


def subsample(data: GridDataset, strides: Sequence[int] | None) -> GridDataset:
    if not strides:
        return data
    if len(strides) != len(data.axis_points):
        raise ConfigError("one stride per axis is required")
    sl = tuple(slice(None, None, int(s)) for s in strides)
    pts = [p[s] for p, s in zip(data.axis_points, sl)]
    return GridDataset(data.axis_names, pts, data.values[sl], data.u, data.alpha)


def load_manifest(data_dir: str | Path, split: str) -> list[GridDataset]:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"missing dataset manifest {manifest}; run oracle-gen first")
    entries = [e for e in json.loads(manifest.read_text())["files"] if e["split"] == split]
    if not entries:
        raise ConfigError(f"no {split} datasets listed in {manifest}")
    out = []
    for e in entries:
        path = data_dir / e["path"]
        if not path.exists():
            raise ConfigError(f"missing dataset {path}")
        out.append(load_dataset(path))
    return out


def export_predictions(path: str | Path, model: DbsnModel, data: GridDataset) -> float:
    """Write prediction, oracle and absolute error per node; returns the MSE."""
    pred = model.predict_grid(data.u, data.alpha, data.axis_points)
    err = np.abs(pred - data.values)
    mesh = np.meshgrid(*data.axis_points, indexing="ij")
    cols = [m.ravel() for m in mesh] + [pred.ravel(), data.values.ravel(), err.ravel()]
    header = [*data.axis_names, "value_pred", "value_oracle", "abs_err"]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.column_stack(cols), delimiter=",", fmt="%.17g", header=",".join(header), comments="")
    return float(np.mean(err**2))


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def checkpoint_header(model: DbsnModel) -> dict:
    s = model.spec
    return {
        "family": model.family.to_dict(),
        "counts": list(model.counts),
        "orders": list(model.orders),
        "net": {"input_dim": s.input_dim, "hidden": list(s.hidden), "output_dim": s.output_dim,
                "activation": s.activation, "residual": s.residual},
        "seed": model.seed,
        "pinning": model.pinning.to_list(),
        "n_params": model.params.size,
        "dtype": "<f8",
    }


def save_checkpoint(path: str | Path, model: DbsnModel) -> None:
    header = json.dumps(to_jsonable(checkpoint_header(model)), sort_keys=True).encode("utf-8")
    blob = model.params.flatten().astype("<f8").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(b"%d\n" % len(header))
        fh.write(header + b"\n")
        fh.write(blob)


def load_checkpoint(path: str | Path) -> DbsnModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise ConfigError(f"{path} is not a checkpoint")
    rest = raw[len(MAGIC):]
    line, rest = rest.split(b"\n", 1)
    n = int(line)
    header = json.loads(rest[:n].decode("utf-8"))
    blob = rest[n + 1:]
    net = header["net"]
    spec = MlpSpec(net["input_dim"], tuple(net["hidden"]), net["output_dim"], net["activation"], net["residual"])
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    if flat.size != header["n_params"] or flat.size != spec.n_params():
        raise ConfigError(f"{path}: weight blob has {flat.size} values, expected {spec.n_params()}")
    params = init_params(spec, 0).unflatten(flat)
    family = family_from_dict(header["family"])
    return DbsnModel(family, header["counts"], header["orders"], spec, params,
                     PinningPlan.from_list(header["pinning"]), header["seed"])
