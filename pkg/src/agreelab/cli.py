"""Command-line front end for the experiment harness."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .errors import AgreementLabError, BudgetExceeded, ConfigInvalid, MissingResults
from .experiments import (
    ExperimentConfig,
    dump_config,
    load_config,
    report,
    rows_to_csv,
    run_experiment,
    sweep,
)

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_MISSING = 0, 2, 3, 4

SUBCOMMANDS = {
    "simulate": "agreement",
    "construct-prior": "construct_prior",
    "lower-bound": "lower_bound",
    "bounded": "bounded",
    "needle": "needle",
    "tail-risk": "tail_risk",
    "sweep": None,
    "report": None,
}


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agreelab", description="Multi-agent agreement experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("results", type=Path, help="directory holding stored rows")
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=_u64)
        p.add_argument("--out", type=Path)
        p.add_argument("--format", choices=("csv", "json"))
        p.add_argument("--trials", type=int)
        p.add_argument("--budget", type=int, help="sampling-tree node cap")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    body: dict = {}
    if args.config is not None:
        try:
            body = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read config: {exc}") from exc
        if not isinstance(body, dict):
            raise ConfigInvalid("config must be a JSON object")
    kind = SUBCOMMANDS[args.command]
    if kind is not None:
        if body.get("kind", kind) != kind:
            raise ConfigInvalid(f"config kind {body['kind']!r} does not match subcommand {args.command!r}")
        body["kind"] = kind
    for flag in ("seed", "trials", "budget", "format"):
        value = getattr(args, flag)
        if value is not None:
            body[flag] = value
    if args.out is not None:
        body["out"] = str(args.out)
    if "seed" not in body:
        raise ConfigInvalid("a seed is required (config 'seed' or --seed)")
    return load_config(body)


def _emit(rows, fmt: str, stream) -> None:
    if fmt == "json":
        stream.write(json.dumps(list(rows), sort_keys=True, indent=1) + "\n")
    else:
        stream.write(rows_to_csv(rows))


def main(argv: Sequence[str] | None = None, stdout=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            files = report(args.results, args.format or "csv")
            if args.out is None:
                for name in sorted(files):
                    stdout.write(f"# {name}\n{files[name]}")
            else:
                args.out.mkdir(parents=True, exist_ok=True)
                for name, text in files.items():
                    (args.out / name).write_text(text)
            return EXIT_OK
        config = resolve_config(args)
        if args.command == "sweep":
            rows, summary = sweep(config)
            if config.out is None:
                _emit(rows, config.format, stdout)
                stdout.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        else:
            rows = run_experiment(config)
            if config.out is None:
                _emit(rows, config.format, stdout)
        return EXIT_OK
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except MissingResults as exc:
        print(f"missing results: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigInvalid, AgreementLabError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


__all__ = ["build_parser", "dump_config", "main", "resolve_config"]
