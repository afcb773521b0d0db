"""Command line entry point: ``metainv <experiment> --config PATH [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .numerics import NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

EXPERIMENTS = ("toy", "train", "finetune", "eval", "bayes-check")

log = logging.getLogger("metainv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metainv", description=__doc__)
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="TOML config, or a manifest.json to replay")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
        if cfg.experiment != args.experiment:
            raise ConfigError(f"config describes a {cfg.experiment!r} experiment, not {args.experiment!r}")
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    from .harness import run_experiment

    try:
        result = run_experiment(cfg)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG

    print(json.dumps(result.report, indent=2, sort_keys=True, default=float))
    log.info("outputs written to %s", result.output_dir)
    if cfg.experiment == "bayes-check" and not result.report["passed"]:
        log.error("bayes-check failed: max relative error %.3e", result.report["max_relative_error"])
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
