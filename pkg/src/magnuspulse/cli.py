"""Command-line front end for the benchmark pipeline.

Stages chain through artifacts on disk: seed-stage writes archive.json,
dt-scan reads it and writes scan.csv / scan.json, race reads both. All
artifacts for one configuration live in out/run_<hash>/ where the hash
covers every numerical input, so rerunning with the same config and seed
lands in (and overwrites) the same directory.

Exit codes: 0 on success, 1 for an invalid configuration or missing
prerequisite artifacts caused by it, 2 for a numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from .bench import (
    BenchConfig,
    BenchError,
    ConfigError,
    load_archive,
    load_config,
    load_scan,
    report_initialization,
    run_directory,
    run_dt_scan,
    run_gradcheck,
    run_race,
    run_seed_stage,
)
from .coefficients import QuadratureError
from .optimizer import OptimizationError
from .propagators import ConvergenceError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magnuspulse-bench",
        description="Benchmark Magnus propagation schemes on a spin-chain "
        "state transfer problem.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        metavar="PATH",
        help="JSON configuration file (defaults apply when omitted)",
    )
    common.add_argument(
        "--out",
        metavar="DIR",
        default="out",
        help="output root; artifacts land in DIR/run_<confighash>/",
    )
    common.add_argument(
        "--rng-seed",
        type=int,
        metavar="N",
        help="override seeds.rng_seed from the config",
    )

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser(
        "seed-stage",
        parents=[common],
        help="optimize random seed pulses on the fine grid and archive them",
    )
    sub.add_parser(
        "dt-scan",
        parents=[common],
        help="scan simulation error versus step size for every scheme",
    )
    race = sub.add_parser(
        "race",
        parents=[common],
        help="re-optimize archived seeds per scheme at its equal-accuracy "
        "step size",
    )
    race.add_argument(
        "--include-init",
        action="store_true",
        help="add the per-scheme setup time to every wall-clock sample",
    )
    sub.add_parser(
        "init-report",
        parents=[common],
        help="time the pulse-independent setup work per scheme",
    )
    sub.add_parser(
        "gradcheck",
        parents=[common],
        help="audit analytic gradients against finite differences",
    )
    return parser


def _load(args) -> BenchConfig:
    if args.config is None:
        config = BenchConfig()
        if args.rng_seed is not None:
            data = config.to_dict()
            data["seeds"]["rng_seed"] = args.rng_seed
            config = BenchConfig.from_dict(data)
        return config
    return load_config(args.config, rng_seed=args.rng_seed)


def _run(args) -> None:
    config = _load(args)
    if getattr(args, "include_init", False):
        data = config.to_dict()
        data["output"]["include_initialization"] = True
        config = BenchConfig.from_dict(data)
    run_dir = run_directory(config, args.out)

    if args.command == "seed-stage":
        archive = run_seed_stage(config, args.out)
        good = [e for e in archive["entries"] if "error" not in e]
        failed = len(archive["entries"]) - len(good)
        best = min((e["true_infidelity"] for e in good), default=float("nan"))
        print(f"archived {len(good)} optimized seeds ({failed} failed), "
              f"best true infidelity {best:.3e}")
    elif args.command == "dt-scan":
        archive = load_archive(config, args.out)
        scan = run_dt_scan(config, archive, args.out)
        for name in config.schemes:
            summary = scan.per_scheme[name]
            slope = "n/a" if summary.slope is None else f"{summary.slope:+.2f}"
            star = "n/a" if summary.n_star is None else str(summary.n_star)
            note = f"  ({summary.note})" if summary.note else ""
            print(f"{name}: slope {slope}, steps for target {star}{note}")
    elif args.command == "race":
        archive = load_archive(config, args.out)
        scan = load_scan(config, archive, args.out)
        race = run_race(config, archive, scan, args.out)
        for name, info in race["summary"]["schemes"].items():
            good = [s for s in info["seeds"] if "error" not in s]
            if good:
                best = min(s["final_infidelity"] for s in good)
                cost = max(s["total_exponentiations"] for s in good)
                print(f"{name}: n={info['n_star']}, best infidelity "
                      f"{best:.3e}, max cost {cost} exponentiations")
            else:
                print(f"{name}: every seed failed")
    elif args.command == "init-report":
        report = report_initialization(config, args.out)
        print(f"model build {report['model_seconds']:.3f}s; per-scheme "
              f"setup times written for {len(report['per_scheme'])} schemes")
    elif args.command == "gradcheck":
        report = run_gradcheck(config, args.out)
        worst = max(report["worst_margin"].values())
        print(f"gradient check passed, worst margin {worst:.3e}")
    print(f"artifacts in {run_dir}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (BenchError, QuadratureError, ConvergenceError,
            OptimizationError) as exc:
        print(f"benchmark failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
