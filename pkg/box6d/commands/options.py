from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Any

from box6d.config import get_settings, load_config, with_overrides
from box6d.schemas import PipelineConfig

logger = logging.getLogger(__name__)


def parse_bounds(text: str) -> tuple[float, float]:
    parts = [part.strip() for part in text.split(",")]
    try:
        lo, hi = (float(part) for part in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from exc
    if not 0 < lo < hi:
        raise argparse.ArgumentTypeError(f"need 0 < lo < hi, got {text!r}")
    return lo, hi


def add_config_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="key=value pipeline config file")


def add_run_flags(parser: argparse.ArgumentParser) -> None:
    """Flags shared by every command that runs the estimation pipeline."""
    add_config_flag(parser)
    parser.add_argument("--jobs", type=int, default=None, help="scene workers (default: logical CPUs)")
    parser.add_argument("--tau-px", type=float, default=None, help="extent convergence tolerance in pixels")
    parser.add_argument("--t-max", type=int, default=None, help="dimension search iteration cap")
    parser.add_argument("--bounds", type=parse_bounds, default=None, help="initial scale bounds 'lo,hi'")
    parser.add_argument("--no-early-stop", action="store_true", help="always run the full binary search")
    parser.add_argument("--no-depth-filter", action="store_true", help="skip depth-consistency filtering")


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config)
    overrides: dict[str, Any] = {}
    if getattr(args, "tau_px", None) is not None:
        overrides["dimsearch.tau_px"] = args.tau_px
    if getattr(args, "t_max", None) is not None:
        overrides["dimsearch.t_max"] = args.t_max
    if getattr(args, "bounds", None) is not None:
        lo, hi = args.bounds
        overrides["dimsearch.bounds_lo"] = (lo, lo, lo)
        overrides["dimsearch.bounds_hi"] = (hi, hi, hi)
    if getattr(args, "no_early_stop", False):
        overrides["dimsearch.early_stop_enabled"] = False
    if getattr(args, "no_depth_filter", False):
        overrides["depthfilter.enabled"] = False
    if overrides:
        logger.debug("Command-line overrides: %s", overrides)
        config = with_overrides(config, overrides)
    return config


def resolve_jobs(args: argparse.Namespace) -> int | None:
    jobs = getattr(args, "jobs", None)
    return jobs if jobs is not None else get_settings().jobs
