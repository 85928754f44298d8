"""Command-line entry point.

Subcommands: gen, train, calibrate, evaluate, sweep-gamma. Each takes
--config PATH (JSON) plus overrides. Exit codes: 0 success, 2 config
error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from volpi.errors import ConfigError, FormatError, MissingArtifactError, NumericalError
from volpi.pipeline import (
    DEFAULT_SWEEP_GAMMAS,
    ExperimentConfig,
    run_calibrate,
    run_evaluate,
    run_gen,
    run_sweep_gamma,
    run_train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="override config out_dir")
    parser.add_argument("--alpha", type=float, default=None, help="override miscoverage alpha")
    parser.add_argument("--gamma", type=float, default=None, help="override triad loss gamma")
    parser.add_argument(
        "--methods", default=None, help="comma-separated subset of triad,ct,mc,tta,regcnn"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volpi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the phantom dataset + split manifest")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty dataset dir")

    p = sub.add_parser("train", help="train a model variant")
    _add_common(p)
    p.add_argument(
        "--variant",
        required=True,
        choices=("baseline", "dropout", "triad", "regcnn", "all"),
    )

    p = sub.add_parser("calibrate", help="fit per-class corrective factors")
    _add_common(p)
    p.add_argument("--method", default="all", help="one method id or 'all'")

    p = sub.add_parser("evaluate", help="score calibrated methods on the test fold")
    _add_common(p)

    p = sub.add_parser("sweep-gamma", help="train/evaluate a triad net per gamma")
    _add_common(p)
    p.add_argument("--gammas", default=None, help="comma-separated gamma values")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json_file(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.alpha is not None:
        updates["alpha"] = args.alpha
    if getattr(args, "gamma", None) is not None:
        updates["gamma"] = args.gamma
    if args.methods is not None:
        updates["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    return replace(cfg, **updates) if updates else cfg


def _dispatch(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    if args.command == "gen":
        ids = run_gen(cfg, force=args.force)
        print(f"generated {len(ids)} cases under {cfg.dataset_dir}")
    elif args.command == "train":
        variants = (
            ("baseline", "dropout", "triad", "regcnn")
            if args.variant == "all"
            else (args.variant,)
        )
        for variant in variants:
            traces = run_train(cfg, variant)
            for run, trace in enumerate(traces):
                print(
                    f"trained {variant} run{run}: loss {trace[0]:.4f} -> {trace[-1]:.4f} "
                    f"({len(trace)} epochs)"
                )
    elif args.command == "calibrate":
        methods = cfg.methods if args.method == "all" else (args.method,)
        for run in range(cfg.n_runs):
            for method in methods:
                factor = run_calibrate(cfg, method, run)
                qs = ", ".join(
                    "inf" if u else f"{q:.4f}" for q, u in zip(factor.q, factor.unbounded)
                )
                print(f"calibrated {method} run{run} ({factor.mode}): q = [{qs}]")
    elif args.command == "evaluate":
        for run in range(cfg.n_runs):
            _, rows = run_evaluate(cfg, run)
            print(f"run{run}: wrote reports for {len(rows)} method x class rows "
                  f"under {cfg.reports_dir(run)}")
    elif args.command == "sweep-gamma":
        gammas = (
            tuple(float(g) for g in args.gammas.split(",")) if args.gammas else DEFAULT_SWEEP_GAMMAS
        )
        path = run_sweep_gamma(cfg, gammas)
        print(f"wrote {path}")
    else:  # pragma: no cover - argparse enforces choices
        raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FormatError, FileNotFoundError) as exc:
        print(f"missing/unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
