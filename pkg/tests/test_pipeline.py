from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from box6d.exceptions import DatasetIOError, InvalidArgumentError
from box6d.schemas import PipelineConfig
from box6d.services.core import BoxDims, CameraIntrinsics, InstanceMask, Pose
from box6d.services.dataset_io import write_mask, write_scene
from box6d.services.metrics import iou3d
from box6d.services.pipeline import EstimationService, PoseEstimator, dominant_gt_instance
from box6d.services.scenegen import Scene
from box6d.state import RunStore
from conftest import render_scene

DIMS = BoxDims(0.4, 0.3, 0.25)


@pytest.fixture
def tilted_scene(camera: CameraIntrinsics) -> Scene:
    """Turned and pitched so every axis shows in the silhouette or the depth."""
    rotation = Rotation.from_euler("yx", [35.0, 25.0], degrees=True).as_matrix()
    pose = Pose(rotation=rotation, translation=np.array([0.01, -0.02, 1.6]))
    return render_scene([(pose, DIMS)], camera, background=2.5)


def test_pose_estimator_produces_24_scored_hypotheses(tilted_scene: Scene) -> None:
    estimator = PoseEstimator(tilted_scene.depth, tilted_scene.masks, 1, tilted_scene.camera)

    hypotheses = estimator.hypotheses(DIMS)

    assert len(hypotheses) == 24
    assert [h.label for h in hypotheses] == list(range(24))
    assert all(0.0 <= h.confidence <= 1.0 for h in hypotheses)
    assert len(estimator.cloud) == tilted_scene.masks.count(1)


def test_search_mode_recovers_the_box(tilted_scene: Scene) -> None:
    service = EstimationService(config=PipelineConfig(), mask_source="gt")

    result = service.process_scene("scene_0000", tilted_scene)

    (row,) = result.rows
    (estimate,) = result.estimates
    assert row.instance_id == 1
    assert row.trace_reason in ("extent-converged", "interval-converged", "early-stopped")
    assert row.iterations == estimate.iterations >= 1
    assert row.iou3d >= 0.7
    assert row.iou3d == pytest.approx(iou3d(estimate.pose, estimate.dims, tilted_scene.gt[0].pose, DIMS))
    # Every axis moves off the unit template, depth included.
    assert sorted(estimate.dims.as_array()) == pytest.approx(sorted(DIMS.as_array()), abs=0.05)
    assert len(result.trace_rows) == estimate.iterations
    assert result.failed_instances == []


@pytest.mark.parametrize("mode", ["fixed", "oracle"])
def test_fixed_and_oracle_dimensions_skip_the_search(tilted_scene: Scene, mode: str) -> None:
    service = EstimationService(config=PipelineConfig(), mask_source="gt", dims_mode=mode)

    result = service.process_scene("scene_0000", tilted_scene)

    (estimate,) = result.estimates
    assert estimate.reason == mode
    assert estimate.iterations == 0
    assert estimate.trace is None
    assert result.trace_rows == []
    expected = DIMS if mode == "oracle" else BoxDims(0.35, 0.35, 0.35)
    assert estimate.dims.as_array() == pytest.approx(expected.as_array())


def test_unmatched_ground_truth_is_reported_as_missed(tilted_scene: Scene, tmp_path: Path) -> None:
    empty = tmp_path / "empty.png"
    write_mask(empty, InstanceMask.empty(tilted_scene.camera.width, tilted_scene.camera.height))
    service = EstimationService(config=PipelineConfig(), mask_source="file", mask_path=empty)

    result = service.process_scene("scene_0000", tilted_scene)

    (row,) = result.rows
    assert row.trace_reason == "missed"
    assert row.iou3d == 0.0


def test_file_masks_need_a_path() -> None:
    with pytest.raises(InvalidArgumentError):
        EstimationService(config=PipelineConfig(), mask_source="file")


def test_dominant_gt_instance(tilted_scene: Scene) -> None:
    assert dominant_gt_instance(tilted_scene, tilted_scene.masks, 1) == 1
    assert dominant_gt_instance(tilted_scene, tilted_scene.masks, 5) is None


@pytest.mark.asyncio
async def test_run_records_every_scene_in_the_store(tilted_scene: Scene, tmp_path: Path) -> None:
    for name in ("scene_0001", "scene_0000"):
        write_scene(tilted_scene, tmp_path / name)
    store = RunStore()
    service = EstimationService(config=PipelineConfig(), mask_source="gt", dims_mode="oracle", store=store, jobs=2)

    results = await service.run([tmp_path / "scene_0001", tmp_path / "scene_0000"])

    assert [r.scene_id for r in results] == ["scene_0001", "scene_0000"]
    snapshots = await store.ordered_snapshots(["scene_0000", "scene_0001"])
    assert [s.status for s in snapshots] == ["completed", "completed"]
    assert [r.instance_id for r in snapshots[0].instances] == [1]
    assert snapshots[0].instances[0].reason == "oracle"
    assert len(snapshots[0].rows) == 1


@pytest.mark.asyncio
async def test_missing_scene_fails_the_run(tmp_path: Path) -> None:
    store = RunStore()
    service = EstimationService(config=PipelineConfig(), mask_source="gt", store=store)

    with pytest.raises(DatasetIOError):
        await service.run([tmp_path / "scene_0000"])

    (snapshot,) = await store.ordered_snapshots(["scene_0000"])
    assert snapshot.status == "failed"
