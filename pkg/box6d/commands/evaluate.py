from __future__ import annotations

import argparse
import logging
from pathlib import Path

from box6d.commands.estimate import format_precision_table
from box6d.services.metrics import precision_table
from box6d.services.results_csv import read_results

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    rows = read_results(args.results)
    logger.info("Evaluating %d result rows from %s", len(rows), args.results)
    print(format_precision_table(precision_table(rows)))
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="print the precision table of a results CSV")
    parser.add_argument("results", type=Path, help="results CSV written by 'estimate'")
    parser.set_defaults(handler=run)
