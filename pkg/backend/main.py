"""
longview - longitudinal mammography pair classification.
Main command-line entry point.
"""
import argparse
import os
import sys
from typing import List, Optional

# Add the current directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from pydantic import ValidationError

from commands import (
    register_align,
    register_evaluate,
    register_experiment,
    register_synth,
    register_train,
)
from config import get_settings
from schemas.common import ErrorResponse
from utils.errors import LongviewError, UsageError
from utils.logger import logger

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(
        prog=settings.app_name,
        description="Align, train and evaluate longitudinal exam-pair classifiers",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.version}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_synth(subparsers)
    register_align(subparsers)
    register_train(subparsers)
    register_evaluate(subparsers)
    register_experiment(subparsers)
    return parser


def _fail(error: Exception, exit_code: int) -> int:
    response = ErrorResponse(error=type(error).__name__, message=str(error), exit_code=exit_code)
    logger.error(f"{response.error}: {response.message}")
    print(response.model_dump_json(), file=sys.stderr)
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    logger.info(f"{get_settings().app_name} {args.command} (threads={get_settings().threads})")
    try:
        return args.handler(args)
    except (UsageError, ValidationError) as e:
        return _fail(e, EXIT_USAGE)
    except (LongviewError, OSError) as e:
        return _fail(e, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
