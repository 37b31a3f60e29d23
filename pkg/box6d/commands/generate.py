from __future__ import annotations

import argparse
import asyncio
import logging
import os
from pathlib import Path

from box6d.commands.options import add_config_flag, resolve_config, resolve_jobs
from box6d.exceptions import PlacementError
from box6d.schemas import PipelineConfig
from box6d.services.core import make_rng
from box6d.services.dataset_io import ManifestEntry, write_manifest, write_scene
from box6d.services.scenegen import generate_scene

logger = logging.getLogger(__name__)

SEED_STREAM = 0


def scene_name(index: int) -> str:
    return f"scene_{index:04d}"


def scene_seeds(config: PipelineConfig) -> list[int]:
    """Per-scene seeds drawn from ``dataset.seed``; the same config always yields the same list."""
    rng = make_rng(config.dataset.seed, SEED_STREAM)
    return [int(seed) for seed in rng.integers(0, 2**32, size=config.dataset.n_scenes)]


def _generate_one(config: PipelineConfig, name: str, seed: int, out_dir: Path) -> None:
    scene = generate_scene(config.scenegen.model_copy(update={"seed": seed}))
    write_scene(scene, out_dir / name)


async def generate_dataset(config: PipelineConfig, out_dir: Path, *, jobs: int | None = None) -> list[ManifestEntry]:
    """Write ``dataset.n_scenes`` scenes plus the manifest; scenes whose placement fails are skipped."""
    entries = [ManifestEntry(name=scene_name(i), seed=seed) for i, seed in enumerate(scene_seeds(config))]
    semaphore = asyncio.Semaphore(max(1, jobs or os.cpu_count() or 1))

    async def run(entry: ManifestEntry) -> ManifestEntry | None:
        async with semaphore:
            try:
                await asyncio.to_thread(_generate_one, config, entry.name, entry.seed, out_dir)
            except PlacementError:
                logger.exception("Skipping %s (seed %d)", entry.name, entry.seed)
                return None
        logger.debug("Wrote %s", entry.name)
        return entry

    written = [entry for entry in await asyncio.gather(*(run(e) for e in entries)) if entry is not None]
    write_manifest(out_dir, written)
    logger.info("Generated %d of %d scenes in %s", len(written), len(entries), out_dir)
    return written


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    asyncio.run(generate_dataset(config, args.out, jobs=resolve_jobs(args)))
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("generate", help="write a seeded synthetic dataset")
    add_config_flag(parser)
    parser.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    parser.add_argument("--jobs", type=int, default=None, help="parallel scene writers")
    parser.set_defaults(handler=run)
