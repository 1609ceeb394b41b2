"""Command-line surface: stats collection, merging, benchmarking, reporting.

Each subcommand takes a UTF-8 JSON config file; a few scalar fields can be
overridden with flags. Outputs are artifacts (checkpoints, CSV reports,
optional PNG figures) and are byte-identical across reruns and worker
counts. Exit status is 0 only when no error occurred; failures print
``error[<code>] ...`` with a machine-readable code to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from .calib import ModelSpec, forward_collect, hessian_diag, load_stats, save_stats
from .errors import ConfigError, MissingStatsError, ObimError
from .merge import (
    METHODS,
    MergeOrder,
    MergePlan,
    OBM_METHODS,
    UNAVAILABLE_METHODS,
    run_merge,
)
from .taskvec import compute_task_vector, save_mask
from .tensorstore import read_checkpoint, write_checkpoint
from .util import thread_count


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        _apply_overrides(config, args)
        threads = thread_count(args.threads)
        if args.command == "stats":
            _cmd_stats(config)
        elif args.command == "merge":
            _cmd_merge(config, threads)
        elif args.command == "bench":
            _cmd_bench(config, threads)
        else:
            _cmd_report(config)
        if args.echo_config:
            with open(args.echo_config, "w", encoding="utf-8") as fh:
                json.dump(config, fh, indent=2, sort_keys=True)
                fh.write("\n")
    except ObimError as exc:
        print(f"error[{exc.code}] {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except OSError as exc:
        print(f"error[io] {exc}", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obim",
        description="Checkpoint merging toolkit: saliency-trimmed task vectors, "
                    "iterative disjoint merging, and desk-scale benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("stats", "collect per-layer input statistics from calibration inputs"),
        ("merge", "merge checkpoints per a merge plan; writes checkpoint + CSV"),
        ("bench", "run the synthetic multi-task benchmark; writes CSV"
                  " (columns: method, task_id, loss_base, loss_finetuned,"
                  " loss_merged, sign_conflict_fraction, deviation_fraction,"
                  " kept_0..kept_{K-1}) and optional figures"),
        ("report", "interference report for an already-merged checkpoint"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("config", help="path to a JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--method", default=None, help="override merge method")
        p.add_argument("--output", default=None, help="override output_path")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: machine parallelism; "
                            "env OBIM_THREADS); never affects outputs")
        p.add_argument("--echo-config", default=None, metavar="PATH",
                       help="write the effective config JSON here")
    return parser


def _load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    return config


def _apply_overrides(config: dict, args) -> None:
    if args.seed is not None:
        config["seed"] = args.seed
    if args.method is not None:
        config["method"] = args.method
    if args.output is not None:
        config["output_path"] = args.output


def _require(config: dict, key: str, kind=None):
    if key not in config:
        raise ConfigError(f"missing required field '{key}'", path=key)
    value = config[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"field '{key}' has the wrong type", path=key)
    if isinstance(value, str) and not value:
        raise ConfigError(f"field '{key}' must not be empty", path=key)
    return value


def _parse_spec(config: dict) -> ModelSpec:
    raw = _require(config, "spec", dict)
    try:
        return ModelSpec.from_json_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad model spec: {exc}", path="spec")


def _parse_order(raw, k_models: int) -> MergeOrder | None:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError("order must be an object", path="order")
    policy = raw.get("policy", "rotation")
    sequence = raw.get("sequence", list(range(k_models)))
    try:
        return MergeOrder(tuple(sequence), policy=policy)
    except ValueError as exc:
        raise ConfigError(str(exc), path="order")


def _cmd_stats(config: dict) -> None:
    spec = _parse_spec(config)
    weights = read_checkpoint(_require(config, "weights_path", str))
    inputs_map = read_checkpoint(_require(config, "inputs_path", str))
    if "inputs" not in inputs_map:
        raise ConfigError("calibration file must contain a tensor named 'inputs'",
                          path="inputs_path")
    policy = config.get("policy", "mean_of_squares")
    _, stats = forward_collect(spec, weights, inputs_map["inputs"], policy=policy)
    out = _require(config, "output_path", str)
    save_stats(stats, out)
    for name, vec in stats.sqmean.items():
        print(f"{name}: {vec.size} input features")
    print(f"samples: {stats.sample_count}")
    print(f"wrote {out}")


def _parse_merge_config(config: dict):
    base_path = _require(config, "base_path", str)
    models_raw = _require(config, "models", list)
    if not models_raw:
        raise ConfigError("models list is empty", path="models")
    paths, ratios, stats_paths = [], [], []
    for i, entry in enumerate(models_raw):
        if not isinstance(entry, dict) or "path" not in entry:
            raise ConfigError("each model needs a 'path'", path=f"models[{i}]")
        paths.append(entry["path"])
        ratios.append(float(entry.get("ratio", 1.0 / len(models_raw))))
        stats_paths.append(entry.get("stats_path"))
    method = str(_require(config, "method", str))
    order = _parse_order(config.get("order"), len(models_raw))
    plan = MergePlan(
        method=method,
        ratios=tuple(ratios),
        lam=float(config.get("lambda", 1.0)),
        drop_p=float(config.get("drop_p", 0.5)),
        order=order,
        seed=int(config.get("seed", 0)),
        trim_basis=str(config.get("trim_basis", "total")),
    )
    plan.validate(len(models_raw))
    return base_path, paths, stats_paths, plan


def _cmd_merge(config: dict, threads: int) -> None:
    base_path, model_paths, stats_paths, plan = _parse_merge_config(config)
    base = read_checkpoint(base_path)
    models = [read_checkpoint(p) for p in model_paths]
    spec = _parse_spec(config) if "spec" in config else None
    calib_stats = None
    if plan.method in OBM_METHODS:
        calib_stats = []
        for i, sp in enumerate(stats_paths):
            if sp is None:
                raise MissingStatsError(
                    f"method {plan.method} needs calibration stats for every model",
                    path=f"models[{i}].stats_path")
            calib_stats.append(load_stats(sp))
    merged, audit = run_merge(plan, base, models, calib_stats=calib_stats,
                              spec=spec, threads=threads)
    out = _require(config, "output_path", str)
    write_checkpoint(merged, out)

    deltas = [compute_task_vector(m, base) for m in models]
    stats_row = bench_mod.interference_report(deltas, audit.merged_delta)
    report_path = config.get("report_path", out + ".report.csv")
    columns = ["method", "model", "kept", "total_coords", "overlap_coords",
               "sign_conflict_fraction", "deviation_fraction"]
    rows = []
    for i, kept in enumerate(audit.kept):
        rows.append({
            "method": plan.method, "model": i, "kept": kept,
            "total_coords": audit.total_coords,
            "overlap_coords": audit.overlap_coords,
            "sign_conflict_fraction": stats_row.sign_conflict_fraction,
            "deviation_fraction": stats_row.deviation_fraction,
        })
    with open(report_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(bench_mod.rows_to_csv(rows, columns))
    masks_dir = config.get("masks_dir")
    if masks_dir:
        os.makedirs(masks_dir, exist_ok=True)
        for i, mask in enumerate(audit.masks):
            save_mask(mask, os.path.join(masks_dir, f"mask_{i}.safetensors"))
    print(f"merged {len(models)} models with {plan.method}; "
          f"kept per model: {list(audit.kept)} of {audit.total_coords}; "
          f"overlap: {audit.overlap_coords}")
    print(f"wrote {out}")
    print(f"wrote {report_path}")


def _cmd_bench(config: dict, threads: int) -> None:
    methods = config.get("methods", ["TA", "TIES", "OBIM"])
    for m in methods:
        if m in UNAVAILABLE_METHODS:
            raise ConfigError(
                f"{m} is recognized but unavailable: {UNAVAILABLE_METHODS[m]}",
                path="methods")
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}",
                              path="methods")
    k = int(config.get("tasks", 2))
    cfg = bench_mod.BenchConfig(
        seed=int(config.get("seed", 0)),
        tasks=k,
        d_in=int(config.get("d_in", 8)),
        d_out=int(config.get("d_out", 4)),
        samples=int(config.get("samples", 64)),
        overlap=float(config.get("overlap", 0.0)),
        noise=float(config.get("noise", 0.05)),
        depth=int(config.get("depth", 1)),
        delta_scale=config.get("delta_scale", 0.5),
        input_gain=config.get("input_gain", 1.0),
        ridge=float(config.get("ridge", 0.0)),
        finetune=str(config.get("finetune", "closed_form")),
        epochs=int(config.get("epochs", 400)),
        lr=float(config.get("lr", 0.05)),
        methods=tuple(methods),
        ratios=tuple(config["ratios"]) if config.get("ratios") else None,
        lam=float(config.get("lambda", 1.0)),
        drop_p=float(config.get("drop_p", 0.5)),
        order=_parse_order(config.get("order"), k),
        trim_basis=str(config.get("trim_basis", "total")),
        calib_samples=int(config.get("calib_samples", 100)),
    )
    rows, _, _ = bench_mod.run_benchmark(cfg, threads=threads)
    out = _require(config, "output_path", str)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(bench_mod.rows_to_csv(rows, bench_mod.report_columns(k)))
    print(f"wrote {out}")
    figures_dir = config.get("figures_dir")
    if figures_dir:
        from . import figures
        for path in figures.render_bench_figures(rows, figures_dir):
            print(f"wrote {path}")


def _cmd_report(config: dict) -> None:
    base = read_checkpoint(_require(config, "base_path", str))
    models_raw = _require(config, "models", list)
    if not models_raw:
        raise ConfigError("models list is empty", path="models")
    model_maps = []
    for i, entry in enumerate(models_raw):
        if not isinstance(entry, dict) or "path" not in entry:
            raise ConfigError("each model needs a 'path'", path=f"models[{i}]")
        model_maps.append(read_checkpoint(entry["path"]))
    merged = read_checkpoint(_require(config, "merged_path", str))
    deltas = [compute_task_vector(m, base) for m in model_maps]
    merged_delta = compute_task_vector(merged, base)
    stats = bench_mod.interference_report(deltas, merged_delta)
    nonzero = [int(sum((d[n] != 0).sum() for n in d.names())) for d in deltas]
    columns = (["sign_conflict_fraction", "deviation_fraction", "coordinates"]
               + [f"nonzero_{i}" for i in range(len(deltas))])
    row = {
        "sign_conflict_fraction": stats.sign_conflict_fraction,
        "deviation_fraction": stats.deviation_fraction,
        "coordinates": stats.coordinates,
    }
    for i, nz in enumerate(nonzero):
        row[f"nonzero_{i}"] = nz
    out = _require(config, "output_path", str)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(bench_mod.rows_to_csv([row], columns))
    print(f"deviation fraction: {stats.deviation_fraction:.6f}")
    print(f"sign-conflict fraction: {stats.sign_conflict_fraction:.6f}")
    print(f"wrote {out}")
    figures_dir = config.get("figures_dir")
    if figures_dir:
        from . import figures
        path = figures.render_interference_figure(
            stats, nonzero, stats.coordinates,
            os.path.join(figures_dir, "interference.png"))
        print(f"wrote {path}")


if __name__ == "__main__":
    sys.exit(main())
