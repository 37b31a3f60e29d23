from __future__ import annotations

import argparse
import asyncio
import logging
from pathlib import Path

from box6d.commands.options import add_run_flags, resolve_config, resolve_jobs
from box6d.services.ablation import ABLATIONS, AblationReport, AblationRunner
from box6d.services.dataset_io import list_scene_dirs

logger = logging.getLogger(__name__)


async def run_ablation(args: argparse.Namespace) -> AblationReport:
    config = resolve_config(args)
    use_gt = config.ablation.use_gt_masks and not args.segment
    runner = AblationRunner(
        config=config,
        scene_dirs=list_scene_dirs(args.dataset),
        mask_source="gt" if use_gt else "segment",
        jobs=resolve_jobs(args),
    )
    return await runner.run(args.which, repeats=args.repeats)


def run(args: argparse.Namespace) -> int:
    report = asyncio.run(run_ablation(args))
    print(f"ablation: {report.which}")
    print(report.format_table())
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("ablate", help="paired on/off comparison of one pipeline stage")
    parser.add_argument("dataset", type=Path, help="dataset directory")
    parser.add_argument("--which", choices=ABLATIONS, required=True)
    parser.add_argument("--repeats", type=int, default=None, help="timing repetitions for the early-stop ablation")
    parser.add_argument("--segment", action="store_true", help="use segmenter masks instead of ground truth")
    add_run_flags(parser)
    parser.set_defaults(handler=run)
