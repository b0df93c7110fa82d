"""Command-line surface: simulate, train, adjust, eval, sweep, tabular.

Every subcommand is a pure function of its input files, the resolved
configuration, and the seed; the resolved configuration is printed before
anything runs. Exit codes are stable: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from .adjust import controlled_slopes, do_expectations, naive_slopes
from .errors import CheckpointError, DataError, NumericalError, UsageError
from .evaluation import (
    CellSpec,
    mutual_information,
    rmse_do,
    rmse_naive,
    run_sweep,
)
from .flow import extract_linear_slope
from .simulate import load_scenario, make_scenario, save_scenario, simulate, theta_star
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

WORKERS_ENV = "DECONFLOW_WORKERS"


def _fmt(x: float) -> str:
    return repr(float(x))


def _print_resolved(name: str, settings: dict) -> None:
    print(f"[{name}] resolved config: "
          + json.dumps(settings, sort_keys=True, default=str), flush=True)


def read_csv_matrix(path, expect_columns=None) -> tuple[list[str], np.ndarray]:
    """Read a numeric CSV with a header row; name the offending cell on error."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read '{path}': {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"'{path}' is empty") from None
        rows = []
        for i, row in enumerate(reader, start=2):  # header is line 1
            if len(row) != len(header):
                raise DataError(f"'{path}' line {i}: expected {len(header)} cells, "
                                f"got {len(row)}")
            vals = []
            for name, cell in zip(header, row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"'{path}' line {i}, column '{name}': "
                                    f"non-numeric value {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise DataError(f"'{path}' has a header but no data rows")
    if expect_columns is not None and header != expect_columns:
        raise DataError(f"'{path}' columns {header} != expected {expect_columns}")
    return header, np.array(rows, dtype=np.float64)


def write_csv(path, header: list[str], rows) -> None:
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write '{path}': {exc}") from exc
    with fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config '{path}': {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config '{path}' is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config '{path}' must hold a JSON object")
    return doc


def _train_config(args, file_cfg: dict) -> TrainConfig:
    """Config file values overridden by any explicitly-passed flags."""
    allowed = set(TrainConfig.__dataclass_fields__)
    unknown = set(file_cfg) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}; "
                         f"allowed: {sorted(allowed)}")
    merged = dict(file_cfg)
    for key in allowed:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    if "hidden" in merged and isinstance(merged["hidden"], str):
        merged["hidden"] = tuple(int(tok) for tok in merged["hidden"].split(",") if tok)
    if "n_components" not in merged:
        raise UsageError("the base mixture size must be set (--components or config "
                         "key 'n_components'); there is no safe default")
    try:
        return TrainConfig(**merged)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    p.add_argument("--components", dest="n_components", type=int,
                   help="base mixture size K")
    p.add_argument("--layout", choices=["linear", "blocks"])
    p.add_argument("--blocks", dest="n_blocks", type=int)
    p.add_argument("--hidden", help="comma-separated widths, e.g. 64,64")
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--restarts", type=int)
    p.add_argument("--seed", type=int)


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    settings = {
        "n": args.n, "k_l": args.k_l, "k_q": args.k_q, "beta": args.beta,
        "target_mi": args.target_mi, "samples": args.samples, "seed": args.seed,
        "data_seed": args.data_seed if args.data_seed is not None else args.seed + 1,
        "linear": args.linear, "out": args.out,
    }
    _print_resolved("simulate", settings)
    if not os.path.isdir(args.out):
        raise DataError(f"output directory '{args.out}' does not exist")
    scenario = make_scenario(args.n, args.k_l, args.k_q, args.beta, args.target_mi,
                             seed=args.seed, identity_maps=args.linear)
    data, latents, labels = simulate(scenario, args.samples,
                                     np.random.default_rng(settings["data_seed"]))
    save_scenario(scenario, os.path.join(args.out, "scenario.json"))
    x_names = [f"x{i + 1}" for i in range(args.n)]
    write_csv(os.path.join(args.out, "data.csv"), x_names + ["y"], data)
    write_csv(os.path.join(args.out, "labels.csv"),
              ["l", "q"] + [f"z_{c}" for c in x_names] + ["z_y"],
              [[int(lab[0]), int(lab[1]), *lat] for lab, lat in zip(labels, latents)])
    print(f"[simulate] wrote {len(data)} rows to {args.out}/data.csv "
          f"(MI {mutual_information(scenario.joint.table):.4f} nats)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    config = _train_config(args, _load_json_config(args.config))
    _print_resolved("train", {"data": args.data, "out": args.out,
                              "trainlog": args.trainlog, **asdict(config)})
    _, data = read_csv_matrix(args.data)
    model, log = fit(data, config)
    meta = {"final_val_nll": min((r["best_val_nll"] for r in log.restarts
                                  if r["status"] == "ok"), default=None),
            "seed": config.seed, "config": asdict(config)}
    save_checkpoint(model, args.out, meta=meta)
    if args.trainlog:
        rows = [[e["restart"], e["epoch"], e["train_nll"], e["val_nll"],
                 int(e["restart"] == log.best_restart)] for e in log.epochs]
        write_csv(args.trainlog, ["restart", "epoch", "train_nll", "val_nll",
                                  "is_best_restart"], rows)
    for r in log.restarts:
        marker = " <- best" if r["restart"] == log.best_restart else ""
        print(f"[train] restart {r['restart']}: {r['status']}, "
              f"best val NLL {r['best_val_nll']:.6f}, {r['epochs']} epochs{marker}")
    if model.is_linear and model.n == 1:
        print(f"[train] linear slope readout: {float(extract_linear_slope(model))!r}")
    print(f"[train] checkpoint written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# adjust


def _resolve_queries(spec: str, data: np.ndarray, n: int) -> np.ndarray:
    if spec == "rows":
        return data[:, :n]
    if spec.startswith("grid:"):
        if n != 1:
            raise UsageError("grid queries are only defined for a 1-d cause")
        count = int(spec.split(":", 1)[1])
        lo, hi = data[:, 0].min(), data[:, 0].max()
        return np.linspace(lo, hi, count)[:, None]
    header, rows = read_csv_matrix(spec)
    if rows.shape[1] != n:
        raise DataError(f"query file has {rows.shape[1]} columns, expected {n}")
    return rows


def cmd_adjust(args) -> int:
    _print_resolved("adjust", {"checkpoint": args.checkpoint, "data": args.data,
                               "queries": args.queries, "n_draws": args.n_draws,
                               "seed": args.seed, "out": args.out,
                               "slopes": args.slopes})
    model = load_checkpoint(args.checkpoint)
    header, data = read_csv_matrix(args.data)
    if data.shape[1] != model.dim:
        raise DataError(f"data width {data.shape[1]} does not match the checkpoint "
                        f"(n+1 = {model.dim})")
    queries = _resolve_queries(args.queries, data, model.n)
    ests = do_expectations(model, data, queries, n_draws=args.n_draws,
                           rng=np.random.default_rng(args.seed))
    x_names = header[:model.n]
    write_csv(args.out, x_names + ["theta_hat", "mc_stderr", "n_p", "in_support"],
              [[*e.x, e.theta_hat, e.mc_stderr, e.n_draws, int(e.in_support)]
               for e in ests])
    print(f"[adjust] wrote {len(ests)} interventional estimates to {args.out}")
    if args.slopes:
        theta = np.array([e.theta_hat for e in ests])
        design = np.column_stack([np.ones(len(queries)), queries])
        coef, *_ = np.linalg.lstsq(design, theta, rcond=None)
        slope_path = args.out + ".slopes.csv"
        write_csv(slope_path, ["cause", "beta_adjusted"],
                  [[name, coef[1 + i]] for i, name in enumerate(x_names)])
        for i, name in enumerate(x_names):
            print(f"[adjust] adjusted slope {name}: {float(coef[1 + i])!r}")
        print(f"[adjust] slope summary written to {slope_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    _print_resolved("eval", {"estimates": args.estimates, "scenario": args.scenario,
                             "data": args.data, "out": args.out})
    scenario = load_scenario(args.scenario)
    header, est_rows = read_csv_matrix(args.estimates)
    for col in ("theta_hat",):
        if col not in header:
            raise DataError(f"estimates file lacks a '{col}' column")
    n = scenario.n
    queries = est_rows[:, :n]
    theta_hat = est_rows[:, header.index("theta_hat")]
    oracle = theta_star(scenario, queries)
    report = {
        "scenario_id": scenario.scenario_id(),
        "mi": mutual_information(scenario.joint.table),
        "rmse": rmse_do(theta_hat, oracle),
        "n_queries": len(queries),
    }
    if args.data:
        _, data = read_csv_matrix(args.data)
        report["rmse_naive"] = rmse_naive(data, theta_star(scenario, data[:, :n]))
    write_csv(args.out, list(report), [list(report.values())])
    print("[eval] " + " ".join(f"{k}={v}" for k, v in report.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> int:
    doc = _load_json_config(args.config)
    if "cells" not in doc or "train" not in doc:
        raise UsageError("sweep config must contain 'train' and 'cells'")
    workers = args.workers if args.workers is not None else \
        int(os.environ.get(WORKERS_ENV, "1"))
    config = _train_config(argparse.Namespace(), doc["train"])
    n_draws = int(doc.get("n_draws", 1000))
    cells = []
    for i, c in enumerate(doc["cells"]):
        try:
            cells.append(CellSpec(**c))
        except TypeError as exc:
            raise UsageError(f"cell {i}: {exc}") from exc
    _print_resolved("sweep", {"ledger": args.ledger, "workers": workers,
                              "n_draws": n_draws, "cells": len(cells),
                              **{f"train.{k}": v for k, v in asdict(config).items()}})
    reports = run_sweep(cells, config, ledger_path=args.ledger, workers=workers,
                        n_draws=n_draws)
    for r in reports:
        print(f"[sweep] {r.scenario_id} seed {r.seed}: {r.status} "
              f"rmse={float(r.rmse)!r} rmse_naive={float(r.rmse_naive)!r}")
    print(f"[sweep] {len(reports)} new cells appended to {args.ledger}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# tabular


def _is_integer_coded(col: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(col)) and np.all(col == np.round(col)))


def cmd_tabular(args) -> int:
    file_cfg = _load_json_config(args.config)
    config = _train_config(args, file_cfg)
    causes = [c for c in args.causes.split(",") if c]
    confounders = [c for c in args.confounders.split(",") if c] if args.confounders else []
    settings = {"data": args.data, "causes": causes, "confounders": confounders,
                "target": args.target, "n_draws": args.n_draws,
                "jitter_seed": args.jitter_seed, "out": args.out, **asdict(config)}
    _print_resolved("tabular", settings)

    header, table = read_csv_matrix(args.data)
    missing = [c for c in causes + confounders + [args.target] if c not in header]
    if missing:
        raise UsageError(f"columns not found in '{args.data}': {missing}")
    cause_idx = [header.index(c) for c in causes]
    conf_idx = [header.index(c) for c in confounders]
    target_idx = header.index(args.target)

    x = table[:, cause_idx].copy()
    y = table[:, target_idx]
    jitter_rng = np.random.default_rng(args.jitter_seed)
    for j, name in enumerate(causes):
        if _is_integer_coded(x[:, j]):
            x[:, j] = x[:, j] + jitter_rng.uniform(-0.5, 0.5, size=len(x))
            print(f"[tabular] cause '{name}' is integer-coded; "
                  "added U(-0.5, 0.5) jitter")

    combined = np.column_stack([x, table[:, conf_idx], y])
    n_causes = len(causes)
    beta_naive = naive_slopes(combined, list(range(n_causes)))
    beta_star = None
    if confounders:
        beta_star = controlled_slopes(combined, list(range(n_causes)),
                                      list(range(n_causes, n_causes + len(conf_idx))))
    else:
        print("[tabular] no confounder columns supplied; the controlled column "
              "is omitted")

    model, _ = fit(np.column_stack([x, y]), config)
    ests = do_expectations(model, np.column_stack([x, y]), x, n_draws=args.n_draws,
                           rng=np.random.default_rng(config.seed + 1))
    theta = np.array([e.theta_hat for e in ests])
    design = np.column_stack([np.ones(len(x)), x])
    coef, *_ = np.linalg.lstsq(design, theta, rcond=None)
    beta_adjusted = coef[1:]

    out_header = ["cause", "beta_naive", "beta_adjusted"]
    rows = [[name, beta_naive[i], beta_adjusted[i]] for i, name in enumerate(causes)]
    if beta_star is not None:
        out_header.insert(1, "beta_controlled")
        for i, row in enumerate(rows):
            row.insert(1, beta_star[i])
    write_csv(args.out, out_header, rows)
    for row in rows:
        print("[tabular] " + " ".join(
            f"{k}={float(v)!r}" if isinstance(v, (float, np.floating)) else f"{k}={v}"
            for k, v in zip(out_header, row)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deconflow",
        description="Causally-constrained flows for deconfounded effect estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic confounded dataset")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--k-l", type=int, default=2)
    p.add_argument("--k-q", type=int, default=2)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--target-mi", type=float, default=0.3)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=None)
    p.add_argument("--linear", action="store_true",
                   help="identity maps (scalar cause, linear effect)")
    p.add_argument("--out", required=True, help="existing output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit the flow to a data CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trainlog", help="per-epoch CSV path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adjust", help="interventional estimates from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--queries", default="rows",
                   help="'rows' (default), 'grid:N' (1-d cause), or a CSV path")
    p.add_argument("--n-draws", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--slopes", action="store_true",
                   help="also write an adjusted-slope summary")
    p.set_defaults(func=cmd_adjust)

    p = sub.add_parser("eval", help="score estimates against a scenario's oracle")
    p.add_argument("--estimates", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--data", help="data CSV (enables the naive-baseline RMSE)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a grid of scenario x seed cells")
    p.add_argument("--config", required=True, help="JSON with 'train' and 'cells'")
    p.add_argument("--ledger", required=True, help="append-only results CSV")
    p.add_argument("--workers", type=int, default=None,
                   help=f"parallel cells (default ${WORKERS_ENV} or 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("tabular", help="naive/controlled/adjusted slopes on a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--causes", required=True, help="comma-separated cause columns")
    p.add_argument("--confounders", default="",
                   help="comma-separated observed confounder columns (for the "
                        "controlled baseline only)")
    p.add_argument("--target", required=True)
    p.add_argument("--n-draws", type=int, default=1000)
    p.add_argument("--jitter-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_tabular)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error (usage): {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ad.ShapeError, OSError) as exc:
        print(f"error (data): {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ad.NonFiniteError) as exc:
        print(f"error (numerical): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
