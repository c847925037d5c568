"""pm-viab <subcommand> --config <path> [--out <dir>] [--workers <n>]

Exit status: 0 success, 1 invariant-suite failure, 2 bad configuration, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, Context, load_config
from .experiments import SUBCOMMANDS

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
OUT_ENV = "PM_VIAB_OUT"

log = logging.getLogger("pm_viab")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pm-viab", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=sorted(SUBCOMMANDS))
    parser.add_argument("--config", type=Path, default=None, help="YAML experiment file (defaults if omitted)")
    parser.add_argument("--out", type=Path, default=None, help=f"output directory (overrides ${OUT_ENV})")
    parser.add_argument("--workers", type=int, default=1, help="worker processes for independent cells")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        ctx = Context(cfg)
        ctx.check()
    except (ConfigError, ValueError) as exc:
        print(f"pm-viab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = args.out or (Path(os.environ[OUT_ENV]) if os.environ.get(OUT_ENV) else Path(cfg.out))
    try:
        out.mkdir(parents=True, exist_ok=True)
        ok, paths = SUBCOMMANDS[args.subcommand](ctx, out, max(1, args.workers))
    except OSError as exc:
        print(f"pm-viab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"pm-viab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in paths:
        log.info("wrote %s", p)
    if not ok:
        print(f"pm-viab: {args.subcommand} failed; see {paths[-1]}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
