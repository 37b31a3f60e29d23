from __future__ import annotations

from collections.abc import Sequence
from dataclasses import replace
import logging
import math

import numpy as np

from box6d.exceptions import InvalidArgumentError
from box6d.schemas import FilterConfig
from box6d.services.core import (
    BoxDims,
    CameraIntrinsics,
    DepthImage,
    DepthStats,
    Hypothesis,
    InstanceMask,
    Pose,
    rotation_angle_deg,
)
from box6d.services.render import render_view

logger = logging.getLogger(__name__)

# Residuals closer than this are treated as tied when picking a fallback.
RESIDUAL_TIE = 1e-6


def depth_stats(
    h: Hypothesis,
    dims: BoxDims,
    obs_depth: DepthImage,
    obs_mask: InstanceMask,
    instance: int,
    K: CameraIntrinsics,
    *,
    tau_d: float = FilterConfig().tau_d,
) -> DepthStats:
    """Compare the rendered hypothesis against the observed depth of one instance."""
    view = render_view(dims, h.pose, K)
    rendered = view.mask.data > 0
    n_rendered = int(np.count_nonzero(rendered))
    observed = obs_depth.valid

    free = rendered & observed
    if free.any():
        # Anything visibly behind the hypothesized surface would have been hidden by it.
        hidden = view.depth.data[free] < obs_depth.data[free] - tau_d
        free_space_violation = float(np.count_nonzero(hidden)) / int(np.count_nonzero(free))
    else:
        free_space_violation = 0.0

    own = obs_mask.select(instance)
    # Rendered pixels behind another surface cannot be seen, so they do not count against coverage.
    occluded = rendered & observed & ~own & (obs_depth.data < view.depth.data - tau_d)
    n_visible = n_rendered - int(np.count_nonzero(occluded))

    domain = rendered & own & observed
    n_domain = int(np.count_nonzero(domain))
    if n_visible <= 0 or n_domain == 0:
        return DepthStats(
            median_abs_residual=math.inf,
            protrusion_fraction=0.0,
            coverage=0.0,
            free_space_violation=free_space_violation,
        )

    residual = view.depth.data[domain] - obs_depth.data[domain]
    return DepthStats(
        median_abs_residual=float(np.median(np.abs(residual))),
        protrusion_fraction=float(np.count_nonzero(residual < -tau_d)) / n_domain,
        coverage=min(1.0, n_domain / n_visible),
        free_space_violation=free_space_violation,
    )


def is_consistent(stats: DepthStats, cfg: FilterConfig) -> bool:
    return (
        stats.median_abs_residual <= cfg.max_median_residual
        and stats.protrusion_fraction <= cfg.max_protrusion
        and stats.coverage >= cfg.min_coverage
        and stats.free_space_violation <= cfg.max_free_space_violation
    )


def filter_hypotheses(
    hs: Sequence[Hypothesis],
    dims: BoxDims,
    obs_depth: DepthImage,
    obs_mask: InstanceMask,
    instance: int,
    K: CameraIntrinsics,
    cfg: FilterConfig | None = None,
    *,
    reference: Pose | None = None,
) -> list[Hypothesis]:
    """Drop depth-inconsistent hypotheses; never returns an empty list.

    Survivors carry their DepthStats and are ordered by (-confidence, median residual, label).
    When nothing survives, the single best-residual hypothesis is returned with ``fallback`` set.
    """
    if not hs:
        raise InvalidArgumentError("filter_hypotheses needs at least one hypothesis")
    cfg = cfg or FilterConfig()

    scored = [
        replace(h, depth_stats=depth_stats(h, dims, obs_depth, obs_mask, instance, K, tau_d=cfg.tau_d))
        for h in hs
    ]
    survivors = [h for h in scored if is_consistent(h.depth_stats, cfg)]
    if survivors:
        logger.debug("Depth filter kept %d of %d hypotheses", len(survivors), len(scored))
        return sorted(survivors, key=lambda h: (-h.confidence, h.depth_stats.median_abs_residual, h.label))

    def fallback_key(h: Hypothesis) -> tuple[float, ...]:
        stats = h.depth_stats
        angle = rotation_angle_deg(h.pose.rotation, reference.rotation) if reference is not None else 0.0
        residual = stats.median_abs_residual
        bucket = math.floor(residual / RESIDUAL_TIE) if math.isfinite(residual) else math.inf
        return (
            bucket,
            stats.free_space_violation,
            stats.protrusion_fraction,
            -stats.coverage,
            -h.confidence,
            angle,
            h.label,
        )

    best = min(scored, key=fallback_key)
    logger.debug(
        "Depth filter rejected all %d hypotheses; falling back to label %d (median residual %.4f m)",
        len(scored),
        best.label,
        best.depth_stats.median_abs_residual,
    )
    return [replace(best, fallback=True)]
