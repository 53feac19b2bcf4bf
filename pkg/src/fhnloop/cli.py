"""Command line interface: one subcommand per stage plus ``run`` for the whole pipeline.

Exit codes: 0 all gates pass, 1 a gate failed, 2 configuration or usage
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import STAGES, ConfigError, RunConfig, dependency_closure, parse_config, validate
from .pipeline import ChecksumError, MissingCheckpointError, _Manifest, run_pipeline

EXIT_OK, EXIT_GATE, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults are used when omitted)")
    common.add_argument("--out", help="output directory (overrides [pipeline] out)")
    common.add_argument("--force", action="store_true", help="recompute even when the checkpoint is current")
    common.add_argument("--threads", type=int, help="worker threads (overrides [pipeline] threads)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="fhnloop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage (and missing upstream stages)")
    run = sub.add_parser("run", parents=[common], help="run the pipeline")
    run.add_argument("--stage", action="append", choices=STAGES,
                     help="restrict to this stage (repeatable); default is [pipeline] stages")
    return parser


def _load(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.threads is not None:
        cfg.pipeline.threads = args.threads
    errors = validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE

    stages = args.stage if args.command == "run" else [args.command]
    if args.command != "run":
        # a single-stage command also produces whatever upstream checkpoints are missing
        manifest = _Manifest(Path(args.out or cfg.pipeline.out))
        stages = [s for s in dependency_closure(stages) if s == args.command or manifest.get(s) is None]
    try:
        result = run_pipeline(cfg, out=args.out, stages=stages, force=args.force)
    except (ChecksumError, MissingCheckpointError) as exc:
        print(f"fhnloop: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"fhnloop: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for name, res in result.results.items():
        failed = [g for g, ok in res.gates.items() if not ok]
        tag = "cached" if res.cached else f"{res.wall_time:.1f}s"
        line = f"{name:9s} {res.status:7s} ({tag})"
        if failed:
            line += "  failed gates: " + ", ".join(failed)
        if res.message:
            line += f"  {res.message}"
        print(line)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
