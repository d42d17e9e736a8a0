"""Command-line entry point: ``normec run|preset|verify|list-presets``."""

from __future__ import annotations

import argparse
import sys

from normec.harness import OUTPUT_ROOT_ENV, ConfigError, ExperimentConfig, OutputDirError, apply_overrides, load_config, run_experiment
from normec.presets import describe, preset_dict, preset_names

EXIT_OK, EXIT_ORACLE_FAILURE, EXIT_USAGE = 0, 1, 2


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config field, e.g. params.K=200 or grid.gamma=[0.1,1.0]")
    p.add_argument("--output", "-o", help=f"output directory (default: ${OUTPUT_ROOT_ENV} or ./runs, plus the experiment name)")
    p.add_argument("--workers", "-j", type=int, default=1, help="worker processes (results do not depend on this)")
    p.add_argument("--thin", type=int, help="keep every N-th round in per-run CSVs")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--resume", action="store_true", help="skip cells already finished in the output directory")
    mode.add_argument("--overwrite", action="store_true", help="delete an existing output directory first")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="normec", description="Simulate alpha-NormEC and its baselines on synthetic federated problems.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a TOML config")
    p_run.add_argument("config")
    _add_run_options(p_run)

    p_preset = sub.add_parser("preset", help="run a named preset")
    p_preset.add_argument("name")
    _add_run_options(p_preset)

    p_verify = sub.add_parser("verify", help="run the oracle suite")
    p_verify.add_argument("--only", action="append", default=[], help="run only checks whose name contains this text")

    sub.add_parser("list-presets", help="list preset names")
    return parser


def _execute(cfg: ExperimentConfig, args) -> int:
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = run_experiment(cfg, args.output, workers=args.workers, resume=args.resume, overwrite=args.overwrite)
    except OutputDirError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    diverged = sum(bool(r["diverged"]) for r in result.rows)
    print(f"{len(result.rows)} runs written to {result.out_dir} ({diverged} diverged, {result.failures} oracle failures)")
    return result.exit_code


def _with_thin(data: dict, args) -> dict:
    if args.thin is not None:
        data = dict(data, thin=args.thin)
    return data


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list-presets":
            for name in preset_names():
                print(f"{name:16s} {describe(name)}")
            return EXIT_OK
        if args.command == "verify":
            from normec.verify import CHECKS, CheckResult

            ok = True
            for check in CHECKS:
                if args.only and not any(key in check.__name__ for key in args.only):
                    continue
                out = check()
                for res in out if isinstance(out, list) else [out]:
                    assert isinstance(res, CheckResult)
                    print(res.line(), flush=True)
                    ok &= res.passed and res.within_budget
            return EXIT_OK if ok else EXIT_ORACLE_FAILURE
        if args.command == "run":
            cfg = load_config(args.config, args.overrides + ([f"thin={args.thin}"] if args.thin is not None else []))
            return _execute(cfg, args)
        if args.command == "preset":
            try:
                data = preset_dict(args.name)
            except KeyError as err:
                print(f"error: {err.args[0]}", file=sys.stderr)
                return EXIT_USAGE
            cfg = ExperimentConfig.from_dict(_with_thin(apply_overrides(data, args.overrides), args))
            return _execute(cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
