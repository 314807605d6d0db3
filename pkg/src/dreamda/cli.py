"""Command-line front door: ``dreamda <command> [--config FILE] [--set section.key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .dataio import DDATError, default_output_root
from .ndgrad import NumericalError
from .pipeline import COMMANDS, DataError, run

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dreamda")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dreamda", description="Diffusion-based data augmentation at desk scale.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable; wins over the file)")
    p.add_argument("--out", help="output root (default: $DREAMDA_OUT or ./runs)")
    p.add_argument("--workers", type=int, default=1, help="threads for generation (results do not depend on it)")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    root = args.out or default_output_root()
    try:
        manifest = run(args.command, cfg, root, workers=args.workers)
    except (DataError, DDATError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"command": args.command, "config_hash": manifest["config_hash"],
                      "outputs": manifest["outputs"]}, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
