"""Command-line experiment runner.

Subcommands:

    run <config.toml>       train one variant over its seeds, write reports
    ablate <axis> <config>  sweep one ablation axis of the base config
    inspect <path.geobank>  print header fields and per-layer statistics
    gradcheck               run the composed-pipeline gradient suite
    selftest                run the quick invariant suite

Exit codes: 0 success, 2 config/format error, 3 numeric or training failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import experiments, geobank_io, selfcheck
from .errors import (
    ConfigError,
    FormatError,
    GeogroundError,
    NumericError,
    TrainingError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_run_flags(p):
    p.add_argument("--seed-override", type=str, default=None,
                   help="comma-separated seeds replacing the config's list")
    p.add_argument("--out-dir", type=str, default=None,
                   help="override the config's output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="parallel workers for variant x seed runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoground",
        description="geometry-bank grounding experiments and diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="path to a TOML experiment config")
    _add_run_flags(p_run)

    p_abl = sub.add_parser("ablate", help="sweep one ablation axis")
    p_abl.add_argument("axis", choices=experiments.ABLATION_AXES)
    p_abl.add_argument("config", help="path to a TOML experiment config")
    _add_run_flags(p_abl)

    p_ins = sub.add_parser("inspect", help="summarize a .geobank file")
    p_ins.add_argument("path")

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_gc.add_argument("--seeds", type=int, default=5)
    p_gc.add_argument("--tol", type=float, default=1e-5)

    sub.add_parser("selftest", help="quick invariant suite")
    return parser


def _apply_overrides(config, args):
    if args.seed_override is not None:
        try:
            seeds = tuple(int(s) for s in args.seed_override.split(",") if s)
        except ValueError as exc:
            raise ConfigError(f"--seed-override: {exc}") from exc
        if not seeds:
            raise ConfigError("--seed-override: no seeds given")
        config = dataclasses.replace(config, seeds=seeds)
    if args.out_dir is not None:
        config = dataclasses.replace(config, out_dir=args.out_dir)
    return config


def _cmd_run(args) -> int:
    config = _apply_overrides(experiments.load_config(args.config), args)
    summary = experiments.run_experiment(config, threads=args.threads)
    acc = summary.mean(lambda r: r.test_metrics.accuracy)
    print(f"wrote reports to {summary.out_dir}")
    print(f"test_accuracy = {acc:.4f} over seeds {config.seeds}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    config = _apply_overrides(experiments.load_config(args.config), args)
    report = experiments.run_ablation(args.axis, config, threads=args.threads)
    for row in report.rows:
        if row.error is None:
            print(f"{row.variant}: mean={row.mean:.4f} std={row.std:.4f}")
        else:
            print(f"{row.variant}: FAILED ({row.error})")
    if report.incomplete:
        print("ablation incomplete", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_inspect(args) -> int:
    raw = geobank_io.read_geobank(args.path)
    first = raw.layer_indices[0]
    print(f"magic = GEOB  version = {geobank_io.VERSION}")
    print(f"num_layers = {raw.num_layers}")
    print(f"first_layer_index = {first}")
    print(f"layer_indices = {first}..{raw.layer_indices[-1]}")
    print(f"num_frames = {raw.num_frames}")
    print(f"grid = {raw.grid_h}x{raw.grid_w}")
    print(f"d_geo = {raw.d_geo}")
    print(f"tokens_per_frame = {raw.tokens_per_frame}")
    print("layer  mean          std           min           max")
    for i, layer_id in enumerate(raw.layer_indices):
        vals = raw.features[i]
        print(
            f"L{layer_id:<4d} {vals.mean(): .6e} {vals.std(): .6e} "
            f"{vals.min(): .6e} {vals.max(): .6e}"
        )
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    reports = selfcheck.run_gradcheck(seeds=range(args.seeds), tol=args.tol)
    failed = 0
    worst = 0.0
    for label, report in reports:
        err = max(report.max_rel_errors.values())
        worst = max(worst, err)
        status = "pass" if report.passed else "FAIL"
        print(f"{status}  {label}  max_rel_err={err:.3e}")
        if not report.passed:
            failed += 1
            for name, e in sorted(report.max_rel_errors.items()):
                if e > report.tolerance:
                    print(f"      {name}: {e:.3e}")
    print(f"{len(reports) - failed}/{len(reports)} passed; worst {worst:.3e}")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def _cmd_selftest(_args) -> int:
    results = selfcheck.run_selftest()
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.name}: {r.detail}")
        ok = ok and r.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "ablate": _cmd_ablate,
        "inspect": _cmd_inspect,
        "gradcheck": _cmd_gradcheck,
        "selftest": _cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GeogroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
