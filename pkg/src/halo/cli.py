"""Command-line entry point: ``halo <stage> [--config FILE] [--field value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields

from .config import RunConfig, demo_config_path, load_config
from .data import EmptyDatasetError
from .pipeline import STAGES, PipelineError, Run, run_all, run_stage
from .tensor import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("halo")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides the config file)")
    defaults = RunConfig()
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = type(getattr(defaults, f.name))
        if kind is bool:
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None,
                           help=f"default {getattr(defaults, f.name)}")
        else:
            g.add_argument(flag, dest=f.name, type=kind, default=None, metavar=kind.__name__.upper(),
                           help=f"default {getattr(defaults, f.name)!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="halo", description="Desk-scale patch-level preference alignment pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in STAGES + ("run",):
        help_text = "run every stage in order" if name == "run" else f"run the {name} stage"
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--demo", action="store_true", help="use the bundled demo config")
        p.add_argument("--force", action="store_true", help="accept inputs produced under a different config")
        p.add_argument("-v", "--verbose", action="store_true")
        _add_config_flags(p)
    return parser


def config_from_args(args: argparse.Namespace, env=None) -> RunConfig:
    if args.config and args.demo:
        raise ValueError("--config and --demo are mutually exclusive")
    path = demo_config_path() if args.demo else args.config
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return load_config(path, overrides, env)


def main(argv=None, env=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args, env)
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"halo: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    run = Run(cfg, force=args.force)
    try:
        if args.command == "run":
            for rec in run_all(run):
                log.info("%s done in %.1fs", rec["stage"], rec["wall_time"])
        else:
            rec = run_stage(run, args.command)
            log.info("%s done in %.1fs", rec["stage"], rec["wall_time"])
    except NumericalError as exc:
        print(f"halo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PipelineError, EmptyDatasetError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"halo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
