"""Command-line entry point.

Exit status: 0 success, 1 runtime error, 2 usage or config error, 3 numeric
fault. Failures print one JSON line ``{"error": ..., "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import DivergenceError, FormatError, NumericFault
from .config import load_config
from .pipeline import COMMANDS, run_command

EXIT_ERROR, EXIT_USAGE, EXIT_NUMERIC = 1, 2, 3

STRATEGY_ALIASES = {"1": "strategy1", "2": "strategy2", "3": "strategy3"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-po", description="Latent-space step-level preference optimisation on a synthetic task.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="key=value config file")
    parser.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    parser.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    parser.add_argument("--strategy", help="filter strategy: 1, 2, 3 or tie (overrides mpcf.strategy)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    message = " ".join(str(exc).split())
    print(json.dumps({"error": type(exc).__name__, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage text on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            parser.print_usage(sys.stderr)
            return _fail(EXIT_USAGE, ValueError("--seed must be a u64"))
        overrides.append(f"run.seed={args.seed}")
    if args.strategy is not None:
        overrides.append(f"mpcf.strategy={STRATEGY_ALIASES.get(args.strategy, args.strategy)}")
    try:
        text = args.config.read_text(encoding="utf-8") if args.config else ""
        config = load_config(text, overrides)
    except (OSError, FormatError) as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, exc)
    try:
        summary = run_command(args.command, config, args.out)
    except (NumericFault, DivergenceError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        return _fail(EXIT_ERROR, exc)
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
