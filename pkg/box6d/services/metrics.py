from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
import logging
import math
from typing import Protocol

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial import ConvexHull, QhullError

from box6d.exceptions import UndefinedMetricError
from box6d.services.core import (
    OCTAHEDRAL_ROTATIONS,
    BoxDims,
    BoxInstance,
    FloatArray,
    Pose,
    rotation_angle_deg,
)
from box6d.services.render import BOX_FACES, CORNER_SIGNS

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-6
IOU_THRESHOLDS = (0.25, 0.50, 0.70, 0.90)
ROTATION_THRESHOLD_DEG = 20.0
TRANSLATION_THRESHOLD_CM = 5.0


class ErrorRecord(Protocol):
    """Anything carrying per-instance errors: matched instances and results rows alike."""

    @property
    def iou3d(self) -> float: ...

    @property
    def rot_err_deg(self) -> float: ...

    @property
    def trans_err_cm(self) -> float: ...


Criterion = Callable[[ErrorRecord], bool]


def _clip_polygon(polygon: FloatArray, normal: FloatArray, offset: float) -> FloatArray:
    """Sutherland-Hodgman step against the half-space normal . x <= offset."""
    if len(polygon) == 0:
        return polygon
    kept: list[FloatArray] = []
    distances = polygon @ normal - offset
    for i, (current, dist) in enumerate(zip(polygon, distances, strict=True)):
        nxt = polygon[(i + 1) % len(polygon)]
        nxt_dist = distances[(i + 1) % len(polygon)]
        if dist <= 0:
            kept.append(current)
        if (dist < 0 < nxt_dist) or (nxt_dist < 0 < dist):
            t = dist / (dist - nxt_dist)
            kept.append(current + t * (nxt - current))
    return np.array(kept).reshape(-1, 3)


def _clipped_faces(corners: FloatArray, normals: FloatArray, offsets: FloatArray) -> list[FloatArray]:
    pieces = []
    for face in BOX_FACES:
        polygon = corners[list(face)]
        for normal, offset in zip(normals, offsets, strict=True):
            polygon = _clip_polygon(polygon, normal, float(offset))
            if len(polygon) == 0:
                break
        if len(polygon):
            pieces.append(polygon)
    return pieces


def intersection_volume(pose_a: Pose, dims_a: BoxDims, pose_b: Pose, dims_b: BoxDims) -> float:
    """Exact volume shared by two oriented boxes, computed in box B's local frame."""
    relative = pose_b.inverse().compose(pose_a)
    half_a, half_b = dims_a.half, dims_b.half
    corners_a = relative.transform(CORNER_SIGNS * half_a)
    corners_b = CORNER_SIGNS * half_b

    # B is axis-aligned here: |x_i| <= h_i.
    eye = np.eye(3)
    normals_b = np.vstack((eye, -eye))
    offsets_b = np.concatenate((half_b, half_b))
    # A's faces: |R_i . (x - c)| <= h_i.
    axes_a = relative.rotation.T
    center_a = relative.translation
    normals_a = np.vstack((axes_a, -axes_a))
    offsets_a = np.concatenate((half_a + axes_a @ center_a, half_a - axes_a @ center_a))

    pieces = _clipped_faces(corners_a, normals_b, offsets_b) + _clipped_faces(corners_b, normals_a, offsets_a)
    if not pieces:
        return 0.0
    vertices = np.vstack(pieces)
    if len(vertices) < 4:
        return 0.0
    try:
        volume = float(ConvexHull(vertices).volume)
    except QhullError:
        # Flat or empty intersection (touching faces).
        return 0.0
    return min(volume, dims_a.volume, dims_b.volume)


def iou3d(pose_a: Pose, dims_a: BoxDims, pose_b: Pose, dims_b: BoxDims) -> float:
    inter = intersection_volume(pose_a, dims_a, pose_b, dims_b)
    union = dims_a.volume + dims_b.volume - inter
    if union <= 0:
        return 0.0
    return float(np.clip(inter / union, 0.0, 1.0))


def symmetry_group(dims: BoxDims, tol: float = SYMMETRY_TOL) -> list[FloatArray]:
    """Octahedral elements that map the cuboid onto itself (order 4, 8 or 24)."""
    d = dims.as_array()
    return [g for g in OCTAHEDRAL_ROTATIONS if np.allclose(np.abs(g) @ d, d, atol=tol, rtol=0.0)]


def rotation_error_sym(r_pred: ArrayLike, r_gt: ArrayLike, dims: BoxDims, tol: float = SYMMETRY_TOL) -> float:
    r_pred = np.asarray(r_pred, dtype=np.float64)
    return min(rotation_angle_deg(r_pred @ g, r_gt) for g in symmetry_group(dims, tol))


def translation_error_cm(t_pred: ArrayLike, t_gt: ArrayLike) -> float:
    delta = np.asarray(t_pred, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)
    return 100.0 * float(np.linalg.norm(delta))


def pose_true_positive(pred: Pose, gt: Pose, dims: BoxDims, n_deg: float, m_cm: float) -> bool:
    rot_err = rotation_error_sym(pred.rotation, gt.rotation, dims)
    trans_err = translation_error_cm(pred.translation, gt.translation)
    return rot_err <= n_deg and trans_err <= m_cm


def canonical_box(pose: Pose, dims: BoxDims) -> tuple[Pose, BoxDims]:
    """Relabel the box axes by decreasing edge length, keeping the rotation proper."""
    d = dims.as_array()
    order = np.argsort(-d, kind="stable")
    rotation = pose.rotation[:, order].copy()
    if np.linalg.det(rotation) < 0:
        rotation[:, 2] *= -1.0
    return Pose(rotation=rotation, translation=pose.translation), BoxDims.from_array(d[order])


@dataclass(frozen=True, slots=True, eq=False)
class MatchedInstance:
    gt: BoxInstance
    prediction: BoxInstance | None
    iou3d: float
    rot_err_deg: float
    trans_err_cm: float


def _errors(prediction: BoxInstance, gt: BoxInstance) -> tuple[float, float]:
    pred_pose, _ = canonical_box(prediction.pose, prediction.dims)
    gt_pose, gt_dims = canonical_box(gt.pose, gt.dims)
    return (
        rotation_error_sym(pred_pose.rotation, gt_pose.rotation, gt_dims),
        translation_error_cm(pred_pose.translation, gt_pose.translation),
    )


def match_predictions(
    predictions: Sequence[BoxInstance], ground_truths: Sequence[BoxInstance]
) -> list[MatchedInstance]:
    """Greedy detection matching: by decreasing confidence, each prediction takes its best-IoU free gt."""
    assigned: dict[int, tuple[BoxInstance, float]] = {}
    ordered = sorted(predictions, key=lambda p: (-p.confidence, p.instance_id))
    for prediction in ordered:
        best_idx, best_iou = None, 0.0
        for idx, gt in enumerate(ground_truths):
            if idx in assigned:
                continue
            overlap = iou3d(prediction.pose, prediction.dims, gt.pose, gt.dims)
            if overlap > best_iou:
                best_idx, best_iou = idx, overlap
        if best_idx is None:
            logger.debug("Prediction %s overlaps no free ground truth", prediction.instance_id)
            continue
        assigned[best_idx] = (prediction, best_iou)

    matched = []
    for idx, gt in enumerate(ground_truths):
        if idx not in assigned:
            matched.append(MatchedInstance(gt, None, 0.0, math.nan, math.nan))
            continue
        prediction, overlap = assigned[idx]
        rot_err, trans_err = _errors(prediction, gt)
        matched.append(MatchedInstance(gt, prediction, overlap, rot_err, trans_err))
    return matched


def iou_at(threshold: float) -> Criterion:
    return lambda record: record.iou3d >= threshold


def rotation_within(n_deg: float) -> Criterion:
    return lambda record: record.rot_err_deg <= n_deg


def translation_within(m_cm: float) -> Criterion:
    return lambda record: record.trans_err_cm <= m_cm


def pose_within(n_deg: float, m_cm: float) -> Criterion:
    return lambda record: record.rot_err_deg <= n_deg and record.trans_err_cm <= m_cm


def average_precision(results: Sequence[ErrorRecord], criterion: Criterion) -> float:
    """Fraction of ground-truth instances whose assigned prediction meets the criterion.

    Missed instances count as failures (NaN errors never satisfy a threshold).
    """
    if not results:
        raise UndefinedMetricError()
    passed = sum(1 for record in results if criterion(record))
    return passed / len(results)


EVAL_CRITERIA: dict[str, Criterion] = {
    **{f"iou@{t:.2f}": iou_at(t) for t in IOU_THRESHOLDS},
    f"rot<={ROTATION_THRESHOLD_DEG:g}deg": rotation_within(ROTATION_THRESHOLD_DEG),
    f"trans<={TRANSLATION_THRESHOLD_CM:g}cm": translation_within(TRANSLATION_THRESHOLD_CM),
    f"rot<={ROTATION_THRESHOLD_DEG:g}deg&trans<={TRANSLATION_THRESHOLD_CM:g}cm": pose_within(
        ROTATION_THRESHOLD_DEG, TRANSLATION_THRESHOLD_CM
    ),
}


def precision_table(
    results: Sequence[ErrorRecord], criteria: dict[str, Criterion] | None = None
) -> dict[str, float]:
    criteria = EVAL_CRITERIA if criteria is None else criteria
    return {name: average_precision(results, criterion) for name, criterion in criteria.items()}
