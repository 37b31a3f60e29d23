from __future__ import annotations

import argparse
import logging
import sys

from box6d import __version__
from box6d.commands import COMMANDS
from box6d.config import get_settings
from box6d.exceptions import (
    Box6DError,
    ConfigFormatError,
    ConfigValueError,
    DatasetIOError,
    InvalidArgumentError,
    UndefinedMetricError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATASET = 3
EXIT_UNDEFINED_METRIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="box6d", description="Box pose and dimension estimation from depth.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def configure_logging() -> None:
    # Root level comes from BOX6D_LOG_LEVEL (defaults to INFO).
    logging.basicConfig(format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(get_settings().log_level.upper())


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigFormatError as exc:
        for error in exc.errors:
            logger.error("config line %d: %s", error.line_number, error.message)
        return EXIT_USAGE
    except (ConfigValueError, InvalidArgumentError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except DatasetIOError as exc:
        logger.error("%s", exc)
        return EXIT_DATASET
    except UndefinedMetricError as exc:
        logger.error("%s", exc)
        return EXIT_UNDEFINED_METRIC
    except Box6DError:
        logger.exception("Unexpected pipeline failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
