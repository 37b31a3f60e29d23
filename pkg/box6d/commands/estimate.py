from __future__ import annotations

import argparse
import asyncio
import logging
from pathlib import Path

from box6d.commands.options import add_run_flags, resolve_config, resolve_jobs
from box6d.config import get_settings
from box6d.exceptions import InvalidArgumentError
from box6d.schemas import PipelineConfig, ResultRow
from box6d.services.dataset_io import list_scene_dirs, read_scene
from box6d.services.metrics import precision_table
from box6d.services.overlay import render_overlay, write_overlay
from box6d.services.pipeline import EstimationService, MaskSource, SceneResult
from box6d.services.results_csv import write_results, write_traces
from box6d.state import RunStore

logger = logging.getLogger(__name__)

OVERLAY_DIR = "overlays"


def format_precision_table(table: dict[str, float]) -> str:
    width = max(len(name) for name in table)
    return "\n".join(f"{name.ljust(width)}  {value:.4f}" for name, value in table.items())


def _write_overlays(results: list[SceneResult], scene_dirs: list[Path], out_dir: Path) -> None:
    for result, scene_dir in zip(results, scene_dirs, strict=True):
        scene = read_scene(scene_dir)
        image = render_overlay(
            scene.depth,
            scene.camera,
            [(estimate.pose, estimate.dims) for estimate in result.estimates],
            [(box.pose, box.dims) for box in scene.gt],
        )
        write_overlay(out_dir / OVERLAY_DIR / f"{result.scene_id}.png", image)


async def estimate_dataset(
    config: PipelineConfig,
    dataset: Path,
    out_dir: Path,
    *,
    mask_source: MaskSource = "segment",
    mask_path: Path | None = None,
    jobs: int | None = None,
    render_overlays: bool = False,
) -> list[ResultRow]:
    """Run the pipeline over a scene or dataset directory and write the results and traces CSVs."""
    settings = get_settings()
    scene_dirs = list_scene_dirs(dataset)
    store = RunStore()
    service = EstimationService(
        config=config, mask_source=mask_source, mask_path=mask_path, store=store, jobs=jobs
    )
    results = await service.run(scene_dirs)

    snapshots = await store.ordered_snapshots([scene_dir.name for scene_dir in scene_dirs])
    rows = [row for snapshot in snapshots for row in snapshot.rows]
    write_results(out_dir / settings.results_filename, rows)
    write_traces(out_dir / settings.traces_filename, [t for snapshot in snapshots for t in snapshot.trace_rows])
    if render_overlays:
        await asyncio.to_thread(_write_overlays, results, scene_dirs, out_dir)

    failed = sum(record.status == "failed" for snapshot in snapshots for record in snapshot.instances)
    logger.info(
        "Wrote %d result rows for %d scenes (%d failed instances) to %s", len(rows), len(scene_dirs), failed, out_dir
    )
    return rows


def run(args: argparse.Namespace) -> int:
    if args.mask_in is not None and args.gt_masks:
        raise InvalidArgumentError("--mask-in and --gt-masks are mutually exclusive")
    mask_source: MaskSource = "file" if args.mask_in is not None else "gt" if args.gt_masks else "segment"
    rows = asyncio.run(
        estimate_dataset(
            resolve_config(args),
            args.dataset,
            args.out,
            mask_source=mask_source,
            mask_path=args.mask_in,
            jobs=resolve_jobs(args),
            render_overlays=args.render_overlays,
        )
    )
    print(format_precision_table(precision_table(rows)))
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("estimate", help="estimate box poses and dimensions for a scene or dataset")
    parser.add_argument("dataset", type=Path, help="scene directory or dataset directory")
    parser.add_argument("--out", type=Path, default=Path("."), help="directory for results, traces and overlays")
    add_run_flags(parser)
    parser.add_argument("--mask-in", type=Path, default=None, help="instance mask PNG (or directory of <scene>.png)")
    parser.add_argument("--gt-masks", action="store_true", help="use the dataset's instance masks")
    parser.add_argument("--render-overlays", action="store_true", help="write overlays/<scene>.png")
    parser.set_defaults(handler=run)
