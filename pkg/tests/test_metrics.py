from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from box6d.exceptions import UndefinedMetricError
from box6d.schemas import ResultRow
from box6d.services.core import BoxDims, BoxInstance, Pose, make_rng
from box6d.services.metrics import (
    average_precision,
    canonical_box,
    intersection_volume,
    iou3d,
    iou_at,
    match_predictions,
    pose_true_positive,
    precision_table,
    rotation_error_sym,
    symmetry_group,
    translation_error_cm,
)
from box6d.services.render import box_corners


def _rot(axis: str, degrees: float) -> np.ndarray:
    return Rotation.from_euler(axis, degrees, degrees=True).as_matrix()


def _pose(rotation: np.ndarray | None = None, translation: tuple[float, float, float] = (0.0, 0.0, 2.0)) -> Pose:
    return Pose(rotation=np.eye(3) if rotation is None else rotation, translation=translation)


def _row(iou: float, rot: float = 1.0, trans: float = 1.0) -> ResultRow:
    return ResultRow(
        scene_id="s",
        instance_id=1,
        iou3d=iou,
        rot_err_deg=rot,
        trans_err_cm=trans,
        iterations=1,
        wall_time_s=0.0,
        trace_reason="extent-converged",
    )


def test_iou_of_identical_boxes_is_one() -> None:
    dims = BoxDims(0.4, 0.3, 0.2)

    assert iou3d(_pose(), dims, _pose(), dims) == pytest.approx(1.0)


def test_iou_of_half_shifted_box_is_one_third() -> None:
    dims = BoxDims(0.4, 0.3, 0.2)

    assert iou3d(_pose(), dims, _pose(translation=(0.2, 0.0, 2.0)), dims) == pytest.approx(1 / 3)


def test_iou_of_disjoint_and_touching_boxes_is_zero() -> None:
    dims = BoxDims(0.4, 0.3, 0.2)

    assert iou3d(_pose(), dims, _pose(translation=(1.0, 0.0, 2.0)), dims) == 0.0
    assert iou3d(_pose(), dims, _pose(translation=(0.4, 0.0, 2.0)), dims) == pytest.approx(0.0, abs=1e-9)


def test_iou_of_nested_boxes_is_volume_ratio() -> None:
    outer, inner = BoxDims(0.4, 0.4, 0.4), BoxDims(0.2, 0.2, 0.2)

    assert iou3d(_pose(), outer, _pose(_rot("z", 30)), inner) == pytest.approx(1 / 8)


def test_intersection_volume_of_overlapping_slabs() -> None:
    dims = BoxDims(0.4, 0.3, 0.2)

    overlap = intersection_volume(_pose(), dims, _pose(translation=(0.1, 0.0, 2.1)), dims)

    assert overlap == pytest.approx(0.3 * 0.3 * 0.1)


def test_iou_of_square_prism_rotated_45_degrees() -> None:
    dims = BoxDims(0.3, 0.3, 0.5)

    # The cross-section is a regular octagon of area 2(sqrt(2) - 1) times the square.
    assert iou3d(_pose(), dims, _pose(_rot("z", 45)), dims) == pytest.approx(1 / math.sqrt(2), abs=1e-9)


def test_iou_is_invariant_under_box_symmetry() -> None:
    dims = BoxDims(0.4, 0.3, 0.2)

    assert iou3d(_pose(), dims, _pose(_rot("x", 180)), dims) == pytest.approx(1.0)
    cube = BoxDims(0.3, 0.3, 0.3)
    assert iou3d(_pose(), cube, _pose(_rot("y", 90)), cube) == pytest.approx(1.0)


def test_iou_matches_monte_carlo_estimate() -> None:
    for seed in range(200):
        rng = make_rng(seed, 77)
        pose_a = _pose(Rotation.random(random_state=seed).as_matrix(), (0.0, 0.0, 0.0))
        pose_b = _pose(Rotation.random(random_state=100 + seed).as_matrix(), tuple(rng.uniform(-0.1, 0.1, 3)))
        dims_a = BoxDims.from_array(rng.uniform(0.2, 0.5, 3))
        dims_b = BoxDims.from_array(rng.uniform(0.2, 0.5, 3))

        corners = np.vstack((box_corners(dims_a, pose_a), box_corners(dims_b, pose_b)))
        samples = rng.uniform(corners.min(axis=0), corners.max(axis=0), size=(1_000_000, 3))
        in_a = np.all(np.abs(pose_a.to_local(samples)) <= dims_a.half, axis=1)
        in_b = np.all(np.abs(pose_b.to_local(samples)) <= dims_b.half, axis=1)
        expected = np.count_nonzero(in_a & in_b) / np.count_nonzero(in_a | in_b)

        assert iou3d(pose_a, dims_a, pose_b, dims_b) == pytest.approx(expected, abs=0.01)


@pytest.mark.parametrize(
    ("dims", "order"),
    [
        (BoxDims(0.4, 0.3, 0.2), 4),
        (BoxDims(0.4, 0.4, 0.2), 8),
        (BoxDims(0.3, 0.3, 0.3), 24),
    ],
)
def test_symmetry_group_order(dims: BoxDims, order: int) -> None:
    assert len(symmetry_group(dims)) == order


def test_rotation_error_respects_symmetry() -> None:
    dims = BoxDims(0.4, 0.3, 0.2)

    assert rotation_error_sym(_rot("z", 180), np.eye(3), dims) == pytest.approx(0.0, abs=1e-5)
    assert rotation_error_sym(_rot("z", 90), np.eye(3), dims) == pytest.approx(90.0)
    assert rotation_error_sym(_rot("z", 90), np.eye(3), BoxDims(0.4, 0.4, 0.2)) == pytest.approx(0.0, abs=1e-5)


def test_pose_true_positive_thresholds() -> None:
    dims = BoxDims(0.4, 0.3, 0.2)
    gt = _pose()

    assert pose_true_positive(_pose(_rot("z", 19), (0.0, 0.0, 2.0)), gt, dims, 20, 5)
    assert not pose_true_positive(_pose(_rot("z", 21), (0.0, 0.0, 2.0)), gt, dims, 20, 5)
    assert not pose_true_positive(_pose(translation=(0.06, 0.0, 2.0)), gt, dims, 20, 5)
    assert translation_error_cm([0.0, 0.03, 0.0], [0.0, 0.0, 0.04]) == pytest.approx(5.0)


def test_canonical_box_orders_axes_by_length() -> None:
    pose, dims = canonical_box(_pose(), BoxDims(0.2, 0.4, 0.3))

    assert dims.as_array().tolist() == [0.4, 0.3, 0.2]
    assert np.linalg.det(pose.rotation) == pytest.approx(1.0)
    assert np.allclose(np.abs(pose.rotation), [[0, 0, 1], [1, 0, 0], [0, 1, 0]])


def test_relabelled_prediction_has_zero_rotation_error() -> None:
    gt = BoxInstance(1, _pose(), BoxDims(0.4, 0.3, 0.2))
    # Same physical box with its x and y axes swapped.
    prediction = BoxInstance(1, _pose(_rot("z", 90)), BoxDims(0.3, 0.4, 0.2))

    (matched,) = match_predictions([prediction], [gt])

    assert matched.iou3d == pytest.approx(1.0)
    assert matched.rot_err_deg == pytest.approx(0.0, abs=1e-5)
    assert matched.trans_err_cm == pytest.approx(0.0)


def test_matching_is_greedy_by_confidence() -> None:
    dims = BoxDims(0.4, 0.3, 0.2)
    gt = [BoxInstance(1, _pose(), dims), BoxInstance(2, _pose(translation=(1.0, 0.0, 2.0)), dims)]
    confident = BoxInstance(10, _pose(translation=(0.05, 0.0, 2.0)), dims, confidence=0.9)
    doubtful = BoxInstance(11, _pose(), dims, confidence=0.5)

    matched = match_predictions([doubtful, confident], gt)

    assert matched[0].prediction is confident
    assert matched[1].prediction is None
    assert matched[1].iou3d == 0.0
    assert math.isnan(matched[1].rot_err_deg)


def test_average_precision_counts_misses_as_failures() -> None:
    rows = [_row(0.95), _row(0.6), _row(0.0, math.nan, math.nan)]

    assert average_precision(rows, iou_at(0.5)) == pytest.approx(2 / 3)
    table = precision_table(rows)
    assert table["iou@0.90"] == pytest.approx(1 / 3)
    assert table["rot<=20deg&trans<=5cm"] == pytest.approx(2 / 3)


def test_precision_on_empty_results_is_undefined() -> None:
    with pytest.raises(UndefinedMetricError):
        precision_table([])
