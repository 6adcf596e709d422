"""Command-line interface: ``pidbsn <command> --config FILE [--seed N] [--out DIR] [--threads N]``.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .cli_io import (
    ExperimentConfig,
    blob_sha1,
    export_predictions,
    file_sha1,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    save_dataset,
    subsample,
    write_json,
)
from .coeff_net import backward, forward, init_params
from .dbsn import ConfigError, LossProblem, TrainConfig, dataset_mse, icbc_violation, mean_abs_residual, train
from .oracles import fd_derivative_check, ls_optimal_control_points, oracle_dataset
from .tensor_field import FitError, GridDataset, SplineField, eval_on_grid

log = logging.getLogger("pidbsn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

# Sample sizes, difference step and tolerances of the gradient checks.
GRADCHECK = {"n_params": 100, "step": 1e-6, "loss_tol": 1e-4, "deriv_tol": 1e-5, "grid": 100}


def _provenance(cfg: ExperimentConfig, inputs: dict[str, str]) -> dict:
    return {"config": cfg.to_dict(), "config_sha1": blob_sha1(cfg.dumps().encode()), "inputs": inputs}


def _datasets(cfg: ExperimentConfig, split: str) -> tuple[list[GridDataset], dict[str, str]]:
    data = load_manifest(cfg.data_path, split)
    files = sorted((cfg.data_path / split).glob("*.csv"))
    return data, {str(p): file_sha1(p) for p in files}


def _checkpoint_path(cfg: ExperimentConfig, override: str | None) -> Path:
    return Path(override) if override else Path(cfg.out) / "model.ckpt"


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_oracle_gen(cfg: ExperimentConfig, args) -> int:
    family = cfg.make_family()
    oracle = dict(cfg.oracle)
    strides = oracle.pop("stride", None)
    files = []
    for split in ("train", "test"):
        for i, (u, a) in enumerate(cfg.params(split)):
            ds = subsample(oracle_dataset(family, u, a, oracle), strides)
            rel = Path(split) / f"{i:03d}.csv"
            save_dataset(cfg.data_path / rel, ds)
            files.append({"split": split, "path": str(rel), "u": u, "alpha": a,
                          "sha1": file_sha1(cfg.data_path / rel), "shape": list(ds.shape)})
            log.info("%s %s: u=%s alpha=%s shape=%s", split, rel, u, a, ds.shape)
    write_json(cfg.data_path / "manifest.json", {**_provenance(cfg, {}), "files": files})
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    family = cfg.make_family()
    params = cfg.params("train")
    tc = cfg.train_config(params)
    data, inputs = _datasets(cfg, "train") if tc.w_d > 0 else ([], {})
    model = cfg.build_model()
    t0 = time.perf_counter()
    model, hist = train(model, family, tc, data)
    elapsed = time.perf_counter() - t0
    out = Path(cfg.out)
    ckpt = _checkpoint_path(cfg, args.checkpoint)
    save_checkpoint(ckpt, model)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "history.csv", np.column_stack([np.arange(len(hist)), hist.loss, hist.physics, hist.data]),
               delimiter=",", fmt=["%d", "%.17g", "%.17g", "%.17g"], header="epoch,loss,physics,data", comments="")
    report = {**_provenance(cfg, inputs), "epochs": len(hist), "checkpoint_sha1": file_sha1(ckpt),
              "final": {"loss": hist.loss[-1] if hist.loss else None,
                        "physics": hist.physics[-1] if hist.physics else None,
                        "data": hist.data[-1] if hist.data else None},
              "train_mse": [dataset_mse(model, d) for d in data]}
    write_json(out / "train_report.json", report)
    write_json(out / "train_timing.json", {"wall_seconds": elapsed})
    log.info("trained %d epochs in %.1f s; checkpoint %s", len(hist), elapsed, ckpt)
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    ckpt = _checkpoint_path(cfg, args.checkpoint)
    model = load_checkpoint(ckpt)
    family = model.family
    data, inputs = _datasets(cfg, "test")
    inputs[str(ckpt)] = file_sha1(ckpt)
    counts = cfg.train.get("collocation") or family.collocation
    t0 = time.perf_counter()
    rows = []
    for i, d in enumerate(data):
        C = model.predict_control_tensor(d.u, d.alpha)
        pred = model.predict_grid(d.u, d.alpha, d.axis_points)
        mse = export_predictions(Path(cfg.out) / "predictions" / f"test_{i:03d}.csv", model, d)
        residuals = {eq.name: mean_abs_residual(model, d.u, d.alpha, counts, eq.name) for eq in family.equations()}
        lo, hi = float(C.min()), float(C.max())
        rows.append({
            "u": d.u, "alpha": d.alpha, "mse": mse, "mean_abs_residual": residuals,
            "control_min": lo, "control_max": hi,
            "prediction_min": float(pred.min()), "prediction_max": float(pred.max()),
            "convex_hull_ok": bool(pred.min() >= lo - 1e-12 and pred.max() <= hi + 1e-12),
            "icbc": icbc_violation(model, d.u, d.alpha),
        })
    elapsed = time.perf_counter() - t0
    summary = {
        "mean_mse": float(np.mean([r["mse"] for r in rows])),
        "mean_abs_residual": {k: float(np.mean([r["mean_abs_residual"][k] for r in rows]))
                              for k in rows[0]["mean_abs_residual"]},
        "icbc_max": {k: max(r["icbc"][k] for r in rows) for k in rows[0]["icbc"]},
        "convex_hull_ok": all(r["convex_hull_ok"] for r in rows),
        # residual metric: mean absolute value over cell-centred collocation points
        "residual_metric": "mean_abs",
    }
    write_json(Path(cfg.out) / "eval_report.json", {**_provenance(cfg, inputs), "summary": summary, "samples": rows})
    write_json(Path(cfg.out) / "eval_timing.json", {"wall_seconds": elapsed})
    log.info("test MSE %.4e over %d samples", summary["mean_mse"], len(rows))
    return EXIT_OK


def _fd_relative_errors(problem: LossProblem, params, idx, step: float) -> np.ndarray:
    _, grads, _ = problem.loss_and_grad(params)
    flat, gflat = params.flatten(), grads.flatten()
    errs = []
    for i in idx:
        vals = []
        for sign in (1, -1):
            q = flat.copy()
            q[i] += sign * step
            vals.append(problem.loss(params.unflatten(q)))
        fd = (vals[0] - vals[1]) / (2 * step)
        errs.append(abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-7))
    return np.array(errs)


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    rng = np.random.default_rng(cfg.seed)
    family = cfg.make_family()
    settings = GRADCHECK
    checks = {}
    model = cfg.build_model()
    u, a = cfg.params("train")[0]

    # Analytic spline derivatives against differences of the next lower order.
    axes = model.bases(u, a)
    field_ = SplineField(axes, rng.uniform(0, 1, model.counts))
    n = settings["grid"] if family.ndim <= 2 else 12
    grid = [np.linspace(b.lo, b.hi, n) for b in axes]
    worst = 0.0
    for k, b in enumerate(axes):
        for p in range(1, min(2, b.order) + 1):
            orders = [0] * family.ndim
            orders[k] = p
            worst = max(worst, fd_derivative_check(field_, grid, orders, settings["step"])["max_abs_error"])
    checks["spline_derivatives"] = {"max_abs_error": worst, "tol": settings["deriv_tol"], "pass": worst <= settings["deriv_tol"]}

    # Network backward pass alone.
    spec = model.spec
    p0 = init_params(spec, cfg.seed + 1)
    X = rng.uniform(-1, 1, (2, spec.input_dim))
    G = rng.normal(size=(2, spec.output_dim))
    out, tape = forward(spec, p0, X)
    grads = backward(p0, tape, G).flatten()
    flat = p0.flatten()
    idx = rng.choice(flat.size, size=min(settings["n_params"], flat.size), replace=False)
    errs = []
    for i in idx:
        vals = []
        for sign in (1, -1):
            q = flat.copy()
            q[i] += sign * settings["step"]
            vals.append(float(np.sum(forward(spec, p0.unflatten(q), X)[0] * G)))
        fd = (vals[0] - vals[1]) / (2 * settings["step"])
        errs.append(abs(fd - grads[i]) / max(abs(fd), abs(grads[i]), 1e-7))
    checks["network_backward"] = {"max_rel_error": float(max(errs)), "n": len(errs), "tol": settings["loss_tol"],
                                  "pass": max(errs) <= settings["loss_tol"]}

    # Full loss: physics plus data against random targets on a coarse grid.
    params = cfg.params("train")[:2]
    data = []
    for pu, pa in params:
        pts = [np.linspace(b.lo, b.hi, 6) for b in model.bases(pu, pa)]
        data.append(GridDataset(family.axis_names, pts, rng.normal(size=(6,) * family.ndim), u=pu, alpha=pa))
    tc = TrainConfig(w_p=1.0, w_d=1.0, collocation=tuple(cfg.train.get("collocation") or family.collocation),
                     train_params=params, seed=cfg.seed)
    problem = LossProblem(model, tc, data)
    idx = rng.choice(model.params.size, size=min(settings["n_params"], model.params.size), replace=False)
    errs = _fd_relative_errors(problem, model.params, idx, settings["step"])
    checks["loss_gradient"] = {"max_rel_error": float(errs.max()), "n": int(errs.size), "tol": settings["loss_tol"],
                               "pass": bool(errs.max() <= settings["loss_tol"])}
    ok = all(c["pass"] for c in checks.values())
    write_json(Path(cfg.out) / "gradcheck_report.json", {**_provenance(cfg, {}), "checks": checks, "pass": ok})
    for name, c in checks.items():
        print(f"{'PASS' if c['pass'] else 'FAIL'} {name}: " + ", ".join(f"{k}={v}" for k, v in c.items() if k != "pass"))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_fit(cfg: ExperimentConfig, args) -> int:
    data, inputs = _datasets(cfg, "test")
    model = cfg.build_model()
    rows = []
    out = Path(cfg.out) / "fit"
    out.mkdir(parents=True, exist_ok=True)
    for i, d in enumerate(data):
        axes = model.bases(d.u, d.alpha)
        C = ls_optimal_control_points(axes, d)
        np.save(out / f"test_{i:03d}.npy", C)
        mse = float(np.mean((eval_on_grid(SplineField(axes, C), d.axis_points) - d.values) ** 2))
        rows.append({"u": d.u, "alpha": d.alpha, "mse_floor": mse, "tensor": f"fit/test_{i:03d}.npy"})
    summary = {"mean_mse_floor": float(np.mean([r["mse_floor"] for r in rows])), "counts": cfg.counts, "orders": cfg.orders}
    write_json(Path(cfg.out) / "fit_report.json", {**_provenance(cfg, inputs), "summary": summary, "samples": rows})
    log.info("LS floor %.4e over %d samples", summary["mean_mse_floor"], len(rows))
    return EXIT_OK


COMMANDS = {
    "oracle-gen": cmd_oracle_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "fit": cmd_fit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pidbsn", description="Physics-informed deep B-spline networks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--threads", type=int, help="limit BLAS/OpenMP threads")
        p.add_argument("--checkpoint", help="checkpoint path (train/eval; default OUT/model.ckpt)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        overrides = cfg.to_dict()
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = ExperimentConfig.from_dict(overrides)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
        with limits:
            return COMMANDS[args.command](cfg, args)
    except (ArithmeticError, FitError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
