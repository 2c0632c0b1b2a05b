"""
Command-line entry point for the transformable NAS pipeline.

Usage:
    transformable-nas <command> --config experiment_config.json [--seed N] [--out DIR]
                      [--constraint-ms T] [--f64] [--force]
"""

import argparse
import sys
from typing import List, Optional

from utils.common.config import get_runtime_settings
from utils.common.errors import exit_code_for
from utils.common.logger import setup_logger
from workflows import COMMANDS, create_run_context, run_command


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transformable-nas",
        description="Latency-constrained architecture search with deep-to-shallow transformation",
    )
    parser.add_argument("command", choices=list(COMMANDS), help="Pipeline stage to run")
    parser.add_argument("--config", required=True, help="Path to the JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
    parser.add_argument("--out", default=None, help="Output directory (overrides output_dir)")
    parser.add_argument("--constraint-ms", type=float, default=None, help="Latency constraint for search")
    parser.add_argument("--f64", action="store_true", help="Verify the transformation in double precision")
    parser.add_argument("--force", action="store_true", help="Accept artifacts produced under another config")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_runtime_settings()
    logger = setup_logger(log_level=settings.log_level, log_to_file=settings.log_to_file,
                          log_file=settings.log_file)

    try:
        ctx = create_run_context(
            args.config,
            seed=args.seed,
            output_dir=args.out,
            constraint_ms=args.constraint_ms,
            f64=args.f64,
            force=args.force,
        )
        run_command(ctx, args.command)
    except Exception as e:
        code = exit_code_for(e)
        if code == 1:
            logger.error(f"'{args.command}' failed: {e}", exc_info=True)
        else:
            logger.error(f"'{args.command}' failed: {e}")
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
