"""Command-line front end: ``edgekd run|validate|replay``.

Exit codes: 0 success, 1 run failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import load_config, validate_config
from .errors import ConfigError, EdgeKDError
from .harness import PRESETS, config_preset, get_preset, replay, run_experiment

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgekd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"edgekd {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-run progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a preset or a scenario file for one or more seeds")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
    source.add_argument("--config", type=Path, help="scenario YAML file")
    run.add_argument("--out", type=Path, required=True, help="output directory")
    run.add_argument("--seed", type=_seeds, help="seed or comma-separated seeds (default 1..5 for presets)")
    run.add_argument("--threads", type=int, default=1,
                     help="worker threads for Phase 1; >1 gives up bitwise reproducibility")

    val = sub.add_parser("validate", help="print the fully resolved config or every error")
    val.add_argument("--config", type=Path, required=True)

    rep = sub.add_parser("replay", help="re-run a manifest and compare CSVs bitwise")
    rep.add_argument("manifest", type=Path)
    rep.add_argument("--out", type=Path, help="also write the replayed CSVs here")
    rep.add_argument("--threads", type=int, default=1)
    return parser


def _report_config_error(exc: ConfigError) -> int:
    print(json.dumps({"errors": exc.issues}, indent=2, default=str), file=sys.stderr)
    return EXIT_CONFIG_ERROR


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            if not args.config.exists():
                raise ConfigError([{"field": "<file>", "value": str(args.config),
                                    "constraint": "file does not exist", "line": None}])
            print(json.dumps(validate_config(args.config), indent=2))
            return EXIT_OK

        if args.command == "replay":
            report = replay(args.manifest, args.out, args.threads)
            if report.skipped:
                print(f"replayed {report.compared} runs; comparison skipped (multi-threaded)")
                return EXIT_OK
            if report.ok:
                print(f"replayed {report.compared} runs; all CSVs bitwise identical")
                return EXIT_OK
            print(f"replay mismatch in: {', '.join(report.mismatches)}", file=sys.stderr)
            return EXIT_RUN_FAILURE

        if args.threads < 1:
            raise ConfigError([{"field": "--threads", "value": args.threads,
                                "constraint": "must be >= 1", "line": None}])
        if args.preset is not None:
            preset = get_preset(args.preset, args.seed)
        else:
            preset = config_preset(load_config(args.config), args.seed)
        manifest = run_experiment(preset, args.out, threads=args.threads)
        print(f"wrote {len(manifest['runs'])} runs to {args.out}")
        return EXIT_OK
    except ConfigError as exc:
        return _report_config_error(exc)
    except (EdgeKDError, OSError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
