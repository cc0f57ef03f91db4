"""Command-line entry point: ``unlearnaug run|report|preset|verify``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as C
from .errors import ConfigError, FormatError, InputError
from .report import write_reports
from .runner import RunManifest, run_experiment, verify

EXIT_OK, EXIT_CONFIG, EXIT_RUN_FAILURES, EXIT_IO = 0, 1, 2, 3


def apply_env_overrides(cfg: C.ExperimentConfig, environ=os.environ) -> C.ExperimentConfig:
    """``UNLEARNAUG_SEED=<int>`` replaces the seed list with that single seed."""
    value = environ.get(C.SEED_ENV)
    if value is None or value == "":
        return cfg
    try:
        seed = int(value)
    except ValueError:
        raise ConfigError(C.SEED_ENV, f"expected an integer, got {value!r}") from None
    return cfg.with_overrides(seeds=[seed])


def _cmd_run(args) -> int:
    cfg = apply_env_overrides(C.load(args.config))
    if args.output_dir:
        cfg = cfg.with_overrides(output_dir=str(args.output_dir))
    manifest = run_experiment(cfg)
    print(cfg.output_dir / "manifest.json")
    for r in manifest.failures:
        print(f"failed: {r.stage} {r.method} {r.policy} seed {r.seed}: {r.error}", file=sys.stderr)
    return EXIT_RUN_FAILURES if manifest.failures else EXIT_OK


def _cmd_report(args) -> int:
    manifest = RunManifest.load(args.manifest)
    results = manifest.results()
    if not results:
        print("manifest holds no completed runs", file=sys.stderr)
        return EXIT_RUN_FAILURES
    out = Path(args.out) if args.out else Path(args.manifest).parent
    cfg = manifest.config
    paths = write_reports(results, out, cfg["gap_mode"], cfg["report"]["rte"])
    for name in (f"report.{args.format}", f"aggregate.{args.format}"):
        print(paths[name])
    return EXIT_RUN_FAILURES if manifest.failures else EXIT_OK


def _cmd_preset(args) -> int:
    cfg = C.preset(args.name)
    if args.write:
        C.save(cfg, args.write)
        print(args.write)
    else:
        sys.stdout.write(C.dumps(cfg))
    return EXIT_OK


def _cmd_verify(args) -> int:
    problems = verify(args.manifest, recheck_data=not args.skip_data)
    for p in problems:
        print(p)
    if not problems:
        print("ok")
    return EXIT_RUN_FAILURES if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearnaug", description="Machine-unlearning augmentation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the experiment grid described by a config file")
    p.add_argument("config", type=Path)
    p.add_argument("--output-dir", type=Path, help="override output_dir from the config")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="regenerate reports from a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", type=Path, help="directory for the report files (default: next to the manifest)")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("preset", help="print or write a preset config")
    p.add_argument("name", choices=sorted(C.PRESETS))
    p.add_argument("--write", type=Path)
    p.set_defaults(func=_cmd_preset)

    p = sub.add_parser("verify", help="re-check invariants on stored checkpoints")
    p.add_argument("manifest", type=Path)
    p.add_argument("--skip-data", action="store_true", help="skip checks that need the dataset")
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
