from __future__ import annotations

import asyncio
from dataclasses import dataclass, field
import logging
import math
import os
from pathlib import Path
import time
from typing import Literal

import numpy as np

from box6d.exceptions import Box6DError, DatasetIOError, InvalidArgumentError
from box6d.schemas import FilterConfig, IcpConfig, PipelineConfig, PoseConfig, ResultRow, RowReason
from box6d.services.core import (
    BoxDims,
    BoxInstance,
    CameraIntrinsics,
    DepthImage,
    FloatArray,
    Hypothesis,
    InstanceMask,
    PointCloud,
    Pose,
    ScaleVec,
    dims_to_scale,
    rotation_angle_deg,
    scaled_template,
)
from box6d.services.dataset_io import read_mask, read_scene
from box6d.services.depthfilter import filter_hypotheses
from box6d.services.dimsearch import SearchTrace, estimate_dimensions, trace_rows
from box6d.services.metrics import match_predictions
from box6d.services.pose import (
    BoxFrame,
    anchor_translation,
    backproject,
    box_frame,
    enumerate_hypotheses,
    icp_refine,
    score_hypothesis,
)
from box6d.services.scenegen import Scene
from box6d.services.segment import proposal_confidences, segment_instances
from box6d.state import InstanceRecord, RunStore

logger = logging.getLogger(__name__)

MaskSource = Literal["segment", "gt", "file"]
DimsMode = Literal["search", "fixed", "oracle"]

# A hypothesis this close to the previous rotation continues it.
CONTINUITY_DEG = 45.0


class PoseEstimator:
    """Hypothesize, filter, select and refine the pose of a template with given dimensions."""

    def __init__(
        self,
        depth: DepthImage,
        mask: InstanceMask,
        instance: int,
        K: CameraIntrinsics,
        *,
        pose_cfg: PoseConfig | None = None,
        icp_cfg: IcpConfig | None = None,
        filter_cfg: FilterConfig | None = None,
    ) -> None:
        self._depth = depth
        self._mask = mask
        self._instance = instance
        self._K = K
        self._pose_cfg = pose_cfg or PoseConfig()
        self._icp_cfg = icp_cfg or IcpConfig()
        self._filter_cfg = filter_cfg or FilterConfig()
        self._cloud = backproject(depth, mask, instance, K)
        self._frame = box_frame(self._cloud, self._pose_cfg)
        self.calls = 0

    @property
    def cloud(self) -> PointCloud:
        return self._cloud

    @property
    def frame(self) -> BoxFrame:
        return self._frame

    def anchor(self, dims: BoxDims, rotation: FloatArray) -> Pose:
        translation = anchor_translation(rotation, dims, self._cloud, self._frame.faces)
        return Pose(rotation=rotation, translation=translation)

    def hypotheses(self, dims: BoxDims) -> list[Hypothesis]:
        """The 24 frame rotations, each anchored on the observed near corner and scored."""
        scored = []
        for h in enumerate_hypotheses(self._frame.pose):
            anchored = Hypothesis(pose=self.anchor(dims, h.pose.rotation), confidence=1.0, label=h.label)
            confidence = score_hypothesis(anchored, self._cloud, dims, delta=self._pose_cfg.score_delta)
            scored.append(Hypothesis(pose=anchored.pose, confidence=confidence, label=h.label))
        return scored

    def select(self, dims: BoxDims, previous: Pose | None) -> Hypothesis:
        """Best depth-consistent hypothesis; the previous rotation is kept while it stays consistent.

        Confidences within ``confidence_tie`` of the best are tied. A filter that rejects every
        hypothesis says nothing about this template, so selection then runs over all of them.
        """
        candidates = self.hypotheses(dims)
        if self._filter_cfg.enabled:
            filtered = filter_hypotheses(
                candidates,
                dims,
                self._depth,
                self._mask,
                self._instance,
                self._K,
                self._filter_cfg,
                reference=previous,
            )
            if filtered[0].fallback:
                logger.debug("Depth filter rejected every hypothesis of instance %d; using confidence", self._instance)
            else:
                candidates = filtered

        if previous is not None:
            angles = {h.label: rotation_angle_deg(h.pose.rotation, previous.rotation) for h in candidates}
            continuing = [h for h in candidates if angles[h.label] < CONTINUITY_DEG]
            if continuing:
                return min(continuing, key=lambda h: (angles[h.label], -h.confidence, h.label))

        best = max(h.confidence for h in candidates)
        tied = [h for h in candidates if h.confidence >= best - self._pose_cfg.confidence_tie]
        return min(tied, key=lambda h: (-h.confidence, h.label))

    def __call__(self, dims: BoxDims, previous: Pose | None) -> Pose:
        self.calls += 1
        if self._pose_cfg.warm_start and previous is not None:
            init = previous
        else:
            init = self.select(dims, previous).pose
        refined = icp_refine(self._cloud, dims, init, self._icp_cfg).pose
        return self.anchor(dims, refined.rotation)


@dataclass(slots=True)
class InstanceEstimate:
    instance_id: int
    pose: Pose
    dims: BoxDims
    confidence: float
    reason: RowReason
    iterations: int
    wall_time_s: float
    trace: SearchTrace | None = None


@dataclass(slots=True)
class SceneResult:
    scene_id: str
    rows: list[ResultRow]
    estimates: list[InstanceEstimate]
    trace_rows: list[dict[str, object]] = field(default_factory=list)
    failed_instances: list[int] = field(default_factory=list)
    processing_time_seconds: float = 0.0


def dominant_gt_instance(scene: Scene, masks: InstanceMask, instance: int) -> int | None:
    """Ground-truth label covering most of an observed instance's pixels."""
    labels = scene.masks.data[masks.select(instance)]
    labels = labels[labels > 0]
    if labels.size == 0:
        return None
    return int(np.bincount(labels).argmax())


class EstimationService:
    """Per-scene estimation: masks, per-instance pose and dimensions, matching, result rows."""

    def __init__(
        self,
        *,
        config: PipelineConfig,
        mask_source: MaskSource = "segment",
        mask_path: Path | None = None,
        dims_mode: DimsMode = "search",
        store: RunStore | None = None,
        jobs: int | None = None,
    ) -> None:
        if mask_source == "file" and mask_path is None:
            raise InvalidArgumentError("mask_path is required when masks come from a file")
        self._config = config
        self._mask_source = mask_source
        self._mask_path = mask_path
        self._dims_mode = dims_mode
        self._store = store
        self._jobs = max(1, jobs or os.cpu_count() or 1)

    def observed_masks(self, scene_id: str, scene: Scene) -> InstanceMask:
        if self._mask_source == "gt":
            return scene.masks
        if self._mask_source == "file":
            assert self._mask_path is not None
            path = self._mask_path / f"{scene_id}.png" if self._mask_path.is_dir() else self._mask_path
            logger.info("Using masks from %s for scene %s", path, scene_id)
            return read_mask(path, scene.camera)
        return segment_instances(scene.depth, scene.camera, self._config.segment)

    def estimate_instance(
        self, scene: Scene, masks: InstanceMask, instance: int, confidence: float
    ) -> InstanceEstimate:
        start = time.perf_counter()
        cfg = self._config
        estimator = PoseEstimator(
            scene.depth,
            masks,
            instance,
            scene.camera,
            pose_cfg=cfg.pose,
            icp_cfg=cfg.icp,
            filter_cfg=cfg.depthfilter,
        )

        if self._dims_mode == "search":
            scale, pose, trace = estimate_dimensions(
                masks, scene.depth, instance, scene.camera, estimator, cfg.dimsearch
            )
            return InstanceEstimate(
                instance_id=instance,
                pose=pose,
                dims=scaled_template(scale),
                confidence=confidence,
                reason=trace.reason,
                iterations=trace.iterations_used,
                wall_time_s=time.perf_counter() - start,
                trace=trace,
            )

        if self._dims_mode == "fixed":
            dims = scaled_template(ScaleVec.from_array(cfg.ablation.fixed_template_scale))
        else:
            gt_id = dominant_gt_instance(scene, masks, instance)
            if gt_id is None:
                raise InvalidArgumentError(f"instance {instance} covers no ground-truth box")
            dims = scene.gt_for(gt_id).dims
            bounds = cfg.dimsearch.bounds_init
            scale = dims_to_scale(dims).as_array()
            if np.any(scale < bounds.lo) or np.any(scale > bounds.hi):
                logger.warning(
                    "Ground-truth scale %s of instance %d lies outside the search bounds", scale.tolist(), instance
                )
        pose = estimator(dims, None)
        return InstanceEstimate(
            instance_id=instance,
            pose=pose,
            dims=dims,
            confidence=confidence,
            reason=self._dims_mode,
            iterations=0,
            wall_time_s=time.perf_counter() - start,
        )

    def process_scene(self, scene_id: str, scene: Scene) -> SceneResult:
        start = time.perf_counter()
        masks = self.observed_masks(scene_id, scene)
        confidences = proposal_confidences(masks)

        estimates: list[InstanceEstimate] = []
        failed: list[int] = []
        for instance in masks.instance_ids():
            try:
                estimates.append(self.estimate_instance(scene, masks, instance, confidences[instance]))
            except Box6DError:
                logger.exception("Estimation failed for instance %d of scene %s", instance, scene_id)
                failed.append(instance)

        predictions = [BoxInstance(e.instance_id, e.pose, e.dims, e.confidence) for e in estimates]
        by_label = {e.instance_id: e for e in estimates}
        failed_gt = {dominant_gt_instance(scene, masks, instance) for instance in failed}

        rows = []
        for matched in match_predictions(predictions, scene.gt):
            gt_id = matched.gt.instance_id
            if matched.prediction is not None:
                estimate = by_label[matched.prediction.instance_id]
                rows.append(
                    ResultRow(
                        scene_id=scene_id,
                        instance_id=gt_id,
                        iou3d=matched.iou3d,
                        rot_err_deg=matched.rot_err_deg,
                        trans_err_cm=matched.trans_err_cm,
                        iterations=estimate.iterations,
                        wall_time_s=estimate.wall_time_s,
                        trace_reason=estimate.reason,
                    )
                )
                continue
            rows.append(
                ResultRow(
                    scene_id=scene_id,
                    instance_id=gt_id,
                    iou3d=0.0,
                    rot_err_deg=math.nan,
                    trans_err_cm=math.nan,
                    iterations=0,
                    wall_time_s=0.0,
                    trace_reason="failed" if gt_id in failed_gt else "missed",
                )
            )

        traces = [
            {"scene_id": scene_id, "instance_id": e.instance_id, **row}
            for e in estimates
            if e.trace is not None
            for row in trace_rows(e.trace)
        ]
        elapsed = time.perf_counter() - start
        logger.info(
            "Scene %s: %d instances estimated, %d failed in %.2fs", scene_id, len(estimates), len(failed), elapsed
        )
        return SceneResult(
            scene_id=scene_id,
            rows=rows,
            estimates=estimates,
            trace_rows=traces,
            failed_instances=failed,
            processing_time_seconds=elapsed,
        )

    async def _run_scene(self, scene_dir: Path, semaphore: asyncio.Semaphore) -> SceneResult:
        scene_id = scene_dir.name
        async with semaphore:
            store = self._store
            if store is not None:
                await store.begin_scene(scene_id)
            try:
                scene = await asyncio.to_thread(read_scene, scene_dir)
                result = await asyncio.to_thread(self.process_scene, scene_id, scene)
            except DatasetIOError as exc:
                if store is not None:
                    await store.fail_scene(scene_id, str(exc))
                raise

            if store is not None:
                for estimate in result.estimates:
                    await store.record_instance(
                        scene_id, InstanceRecord(estimate.instance_id, "estimated", reason=estimate.reason)
                    )
                for instance in result.failed_instances:
                    await store.record_instance(scene_id, InstanceRecord(instance, "failed"))
                await store.complete_scene(
                    scene_id,
                    rows=result.rows,
                    trace_rows=result.trace_rows,
                    processing_time_seconds=result.processing_time_seconds,
                )
            return result

    async def run(self, scene_dirs: list[Path]) -> list[SceneResult]:
        """Process scenes on a worker pool; results come back in the order of ``scene_dirs``."""
        semaphore = asyncio.Semaphore(self._jobs)
        logger.info("Estimating %d scenes with %d workers", len(scene_dirs), self._jobs)
        return list(await asyncio.gather(*(self._run_scene(d, semaphore) for d in scene_dirs)))
