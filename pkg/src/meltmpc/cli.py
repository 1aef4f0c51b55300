"""Command-line pipeline: datagen, train, eval-model, run, compare.

Every command writes into a fresh output directory (append-only workspace)
together with a manifest holding the full config snapshot, seeds and content
hashes of the artifacts it produced.  Exit codes: 0 success, 1 aborted run,
2 configuration/validation error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import artifacts, datagen, loop
from .config import (
    build_tide_config,
    build_train_config,
    config_to_dict,
    load_config,
)
from .dataset import load_dataset
from .errors import ConfigError, MeltMpcError, RunAbortedError
from .tide import TideModel, load_model, save_model, train

WORKSPACE_ENV = "MELTMPC_WORKSPACE"
EXIT_OK = 0
EXIT_ABORTED = 1
EXIT_CONFIG = 2


def _resolve(path: str) -> str:
    base = os.environ.get(WORKSPACE_ENV)
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _fresh_out_dir(path: str) -> str:
    path = _resolve(path)
    if os.path.exists(path) and os.listdir(path):
        raise ConfigError(f"output directory {path} already exists and is not empty")
    os.makedirs(path, exist_ok=True)
    return path


def _load_cfg(args, overrides=None):
    over = dict(overrides or {})
    if getattr(args, "seed", None) is not None:
        over.setdefault("datagen", {})["seed"] = args.seed
        over.setdefault("train", {})["seed"] = args.seed
        over.setdefault("run", {})["seed"] = args.seed
    cfg_path = _resolve(args.config) if args.config else None
    return load_config(cfg_path, over)


# ----------------------------------------------------------------------

def cmd_datagen(args) -> int:
    cfg = _load_cfg(args)
    out = _fresh_out_dir(args.out)
    manifest = datagen.build_dataset(cfg, out)
    stats = manifest["train_stats"]
    print(f"dataset written to {out}")
    print(f"segments: train={manifest['counts']['train']} val={manifest['counts']['val']}"
          f" (window={manifest['window']}, horizon={manifest['horizon']})")
    for i, name in enumerate(manifest["target_columns"]):
        print(f"  target {name}: mean={stats['target_mean'][i]:.4g} "
              f"std={stats['target_std'][i]:.4g}")
    for i, name in enumerate(manifest["covariate_columns"]):
        print(f"  covariate {name}: mean={stats['covariate_mean'][i]:.4g} "
              f"std={stats['covariate_std'][i]:.4g}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args, {"train": {"univariate": bool(args.univariate)}})
    dataset_dir = _resolve(args.dataset)
    train_split, val_split, manifest = load_dataset(dataset_dir)
    problems = artifacts.verify_manifest(manifest, dataset_dir)
    if problems:
        raise ConfigError("; ".join(problems))
    if manifest["window"] != cfg.datagen.window or manifest["horizon"] != cfg.datagen.horizon:
        raise ConfigError(
            f"dataset (w={manifest['window']}, p={manifest['horizon']}) does not match "
            f"config (w={cfg.datagen.window}, p={cfg.datagen.horizon})")
    out = _fresh_out_dir(args.out)

    tide_cfg = build_tide_config(cfg)
    channels = (0,) if cfg.train.univariate else (0, 1)
    model = TideModel(tide_cfg, seed=cfg.train.init_seed)

    def slice_split(split):
        split.past_targets = split.past_targets[:, :, list(channels)]
        split.future_targets = split.future_targets[:, :, list(channels)]
        return split

    history = train(model, slice_split(train_split), slice_split(val_split),
                    build_train_config(cfg))
    model.metadata["target_channels"] = list(channels)
    model.metadata["dataset_hash"] = manifest["artifacts"]["train.bin"]
    save_model(model, out)

    with open(os.path.join(out, "loss_history.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            writer.writerow([row["epoch"], f"{row['train_loss']:.17g}",
                             f"{row['val_loss']:.17g}", f"{row['lr']:.17g}"])

    manifest_out = {
        "kind": "model",
        "config": config_to_dict(cfg),
        "dataset_dir": dataset_dir,
        "best_val_loss": model.metadata.get("best_val_loss"),
        "artifacts": {
            "model.bin": artifacts.sha256_file(os.path.join(out, "model.bin")),
            "model.json": artifacts.sha256_file(os.path.join(out, "model.json")),
            "loss_history.csv": artifacts.sha256_file(os.path.join(out, "loss_history.csv")),
        },
    }
    artifacts.write_manifest(os.path.join(out, "manifest.json"), manifest_out)
    print(f"model written to {out}; best val loss {model.metadata.get('best_val_loss')}")
    return EXIT_OK


def evaluate_model(model: TideModel, split, depth_floor: float = 0.02) -> dict:
    """Median-forecast accuracy on a split: MAPE/RRMSE per channel."""
    channels = model.metadata.get("target_channels", [0, 1])
    truth = split.future_targets[:, :, list(channels)]
    pred = model.predict_median(split.past_targets[:, :, list(channels)],
                                split.past_covariates, split.future_covariates)
    out = {}
    names = ["x_temp", "x_depth"]
    for j, ch in enumerate(channels):
        t = truth[:, :, j].ravel()
        p = pred[:, :, j].ravel()
        if ch == 1:
            keep = t > depth_floor  # tiny depths blow up relative errors
        else:
            keep = np.abs(t) > 1e-12
        if keep.sum() == 0:
            continue
        err = p[keep] - t[keep]
        out[f"{names[ch]}_mape"] = float(np.mean(np.abs(err) / np.abs(t[keep])))
        out[f"{names[ch]}_rrmse"] = float(np.sqrt(np.mean(err ** 2))
                                          / np.sqrt(np.mean(t[keep] ** 2)))
        out[f"{names[ch]}_n"] = int(keep.sum())
    return out


def cmd_eval_model(args) -> int:
    model_dir = _resolve(args.model)
    model = load_model(model_dir)
    _, val_split, manifest = load_dataset(_resolve(args.dataset))
    if (manifest["window"] != model.config.window
            or manifest["horizon"] != model.config.horizon):
        raise ConfigError("dataset and model (w, p) do not match")
    report = evaluate_model(model, val_split)
    for key in sorted(report):
        print(f"{key}: {report[key]:.6g}" if isinstance(report[key], float)
              else f"{key}: {report[key]}")
    if args.out:
        out = _fresh_out_dir(args.out)
        artifacts.write_manifest(os.path.join(out, "eval.json"), {
            "kind": "model-eval", "model": model_dir, "report": report})
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = {}
    if args.controller:
        overrides = {"run": {"controller": args.controller.replace("-", "_")}}
    cfg = _load_cfg(args, overrides)
    out = _fresh_out_dir(args.out)
    model = None
    model_hash = None
    if cfg.run.controller in ("mpc", "mpc_unconstrained"):
        if not args.model:
            raise ConfigError("--model is required for MPC controllers")
        model_dir = _resolve(args.model)
        model = load_model(model_dir)
        model_hash = artifacts.sha256_file(os.path.join(model_dir, "model.bin"))

    solver_log = os.path.join(out, "mpc_log.jsonl") if model is not None else None
    exit_code = EXIT_OK
    try:
        log = loop.run(cfg, model=model, solver_log_path=solver_log)
    except RunAbortedError as exc:
        log = exc.partial_log
        exit_code = EXIT_ABORTED
        print(f"run aborted: {exc}", file=sys.stderr)

    log.save_csv(os.path.join(out, "run.csv"))
    edges, counts = loop.solve_time_histogram(log)
    with open(os.path.join(out, "solve_time_hist.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for i, c in enumerate(counts):
            writer.writerow([f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}", int(c)])

    manifest = {
        "kind": "run",
        "controller": cfg.run.controller,
        "config": config_to_dict(cfg),
        "model_hash": model_hash,
        "metrics": log.metrics,
        "aborted": log.aborted,
        "abort_reason": log.abort_reason,
        "deterministic_hash": log.deterministic_hash(),
        "artifacts": {"run.csv": artifacts.sha256_file(os.path.join(out, "run.csv"))},
        "notes": {"rrmse_normalization": "rms-of-reference"},
    }
    artifacts.write_manifest(os.path.join(out, "manifest.json"), manifest)
    shown = {k: v for k, v in log.metrics.items()
             if k in ("r2", "mape", "rrmse", "total_variation_u",
                      "depth_violation_fraction", "solve_time_mean")}
    print(f"run written to {out}: " + ", ".join(f"{k}={v:.5g}" for k, v in shown.items()))
    return exit_code


def cmd_compare(args) -> int:
    rows = []
    keys = ["r2", "mape", "rrmse", "total_variation_u", "depth_violation_fraction",
            "solve_time_mean", "solve_time_max", "inner_iterations_mean",
            "solver_failures", "solver_fallbacks"]
    for run_dir in args.runs:
        manifest = artifacts.read_manifest(os.path.join(_resolve(run_dir), "manifest.json"))
        row = {"run": run_dir, "controller": manifest.get("controller")}
        for key in keys:
            row[key] = manifest.get("metrics", {}).get(key)
        rows.append(row)
    out = _fresh_out_dir(args.out)
    with open(os.path.join(out, "comparison.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["run", "controller"] + keys)
        writer.writeheader()
        writer.writerows(rows)
    artifacts.write_manifest(os.path.join(out, "comparison.json"),
                             {"kind": "comparison", "rows": rows})
    widths = max(len(r["run"]) for r in rows)
    print(f"{'run':<{widths}}  controller          r2        tv_u      viol")
    for r in rows:
        r2 = "-" if r["r2"] is None else f"{r['r2']:.4f}"
        tv = "-" if r["total_variation_u"] is None else f"{r['total_variation_u']:.1f}"
        vf = "-" if r["depth_violation_fraction"] is None else f"{r['depth_violation_fraction']:.3f}"
        print(f"{r['run']:<{widths}}  {str(r['controller']):<18} {r2:>9} {tv:>9} {vf:>9}")
    return EXIT_OK


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meltmpc",
        description="Melt-pool control workbench: simulate, learn, control, compare.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="simulate excitation profiles into a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train the forecaster on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--univariate", action="store_true",
                   help="temperature-only target channel")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-model", help="validation accuracy of a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_model)

    p = sub.add_parser("run", help="closed-loop (or open-loop) control run")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--controller", default=None,
                   choices=["mpc", "mpc-unconstrained", "pid", "open-loop"])
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="metric table across runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunAbortedError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except MeltMpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
