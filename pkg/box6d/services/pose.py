from __future__ import annotations

from dataclasses import dataclass
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import ConvexHull, QhullError

from box6d.exceptions import DegenerateCloudError, EmptyCloudError, InvalidArgumentError, RankError
from box6d.schemas import IcpConfig, PoseConfig
from box6d.services.core import (
    OCTAHEDRAL_ROTATIONS,
    BoxDims,
    CameraIntrinsics,
    DepthImage,
    FloatArray,
    Hypothesis,
    InstanceMask,
    PointCloud,
    Pose,
    compose,
    make_rng,
    rotation_angle_deg,
)
from box6d.services.segment import fit_plane

logger = logging.getLogger(__name__)

MIN_OBB_POINTS = 10
DEFAULT_SCORE_DELTA = 0.010

FACE_STREAM = 6
FACE_REFINE_ROUNDS = 3
FACE_ORTHOGONALITY_DEG = 15.0
FACE_MATCH_COS = math.cos(math.radians(15.0))
# Order statistic used for a robust extreme of the points along an axis.
EXTREME_RANK = 3


@dataclass(frozen=True, slots=True, eq=False)
class IcpResult:
    pose: Pose
    rmse: float
    converged: bool
    iterations: int


@dataclass(frozen=True, slots=True, eq=False)
class FacePlane:
    """A visible box face: unit normal pointing at the camera and the cloud indices on it."""

    normal: FloatArray
    members: NDArray[np.intp]


@dataclass(frozen=True, slots=True, eq=False)
class BoxFrame:
    """Observed box axes (the columns of ``pose.rotation``) and the faces they were fitted from."""

    pose: Pose
    faces: tuple[FacePlane, ...] = ()


def _points(cloud: PointCloud | ArrayLike) -> FloatArray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def backproject(depth: DepthImage, mask: InstanceMask, instance: int, K: CameraIntrinsics) -> PointCloud:
    """Lift the valid depth pixels of one instance into camera-frame points."""
    selected = mask.select(instance) & depth.valid
    if not selected.any():
        raise EmptyCloudError(instance)
    rows, cols = np.nonzero(selected)
    z = depth.data[rows, cols]
    x = (cols - K.cx) * z / K.fx
    y = (rows - K.cy) * z / K.fy
    return PointCloud(np.column_stack((x, y, z)))


def obb_init(cloud: PointCloud) -> tuple[Pose, FloatArray]:
    """PCA frame of the cloud (descending variance, right-handed) and its half-extents.

    Planar clouds are accepted since a single visible face is the common case; collinear
    clouds are not.
    """
    points = cloud.points
    if len(points) < MIN_OBB_POINTS:
        raise InvalidArgumentError(f"obb_init needs at least {MIN_OBB_POINTS} points, got {len(points)}")
    centroid = points.mean(axis=0)
    centered = points - centroid
    eigenvalues, eigenvectors = np.linalg.eigh(centered.T @ centered / len(points))
    order = eigenvalues.argsort()[::-1]
    eigenvalues = eigenvalues[order]
    axes = eigenvectors[:, order]
    if eigenvalues[0] <= 0 or eigenvalues[1] <= 1e-12 * eigenvalues[0]:
        raise DegenerateCloudError("point cloud is collinear or a single point")
    if np.linalg.det(axes) < 0:
        axes[:, 2] *= -1.0
    half_extents = np.abs(centered @ axes).max(axis=0)
    return Pose(rotation=axes, translation=centroid), half_extents


def align_to_footprint(cloud: PointCloud, frame: Pose) -> Pose:
    """Spin the frame about its least-variance axis onto the minimum-area rectangle of the footprint.

    PCA leaves the in-plane axes arbitrary for square faces; the footprint rectangle does not.
    """
    axes = frame.rotation
    centered = cloud.points - frame.translation
    planar = centered @ axes[:, :2]
    try:
        hull = planar[ConvexHull(planar).vertices]
    except QhullError:
        return frame
    edges = np.roll(hull, -1, axis=0) - hull
    candidates = np.unique(np.round(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), math.pi / 2), 12))

    best_angle, best_area = 0.0, math.inf
    for angle in candidates:
        c, s = math.cos(angle), math.sin(angle)
        rotated = hull @ np.array([[c, -s], [s, c]])
        span = rotated.max(axis=0) - rotated.min(axis=0)
        area = float(span[0] * span[1])
        if area < best_area - 1e-12:
            best_angle, best_area = float(angle), area

    c, s = math.cos(best_angle), math.sin(best_angle)
    u = c * axes[:, 0] + s * axes[:, 1]
    v = -s * axes[:, 0] + c * axes[:, 1]
    return Pose(rotation=np.column_stack((u, v, np.cross(u, v))), translation=frame.translation)


def _orthonormal_columns(columns: FloatArray) -> FloatArray:
    """Closest matrix with orthonormal columns."""
    u, _, vt = np.linalg.svd(columns, full_matrices=False)
    return u @ vt


def _towards_camera(normal: FloatArray, points: FloatArray) -> FloatArray:
    return -normal if float(normal @ points.mean(axis=0)) > 0 else normal


def _refine_faces(
    points: FloatArray, normals: list[FloatArray], levels: list[float], threshold: float
) -> list[FacePlane]:
    """Reassign points to their nearest face plane, refit, and keep the normals mutually orthogonal."""
    axes = _orthonormal_columns(np.column_stack(normals))
    levels_arr = np.array(levels)
    members: list[NDArray[np.intp]] = []
    for _ in range(FACE_REFINE_ROUNDS):
        distances = np.abs(points @ axes - levels_arr)
        nearest = distances.argmin(axis=1)
        close = distances[np.arange(len(points)), nearest] < threshold
        members = [np.flatnonzero(close & (nearest == i)) for i in range(axes.shape[1])]
        if any(len(m) < 3 for m in members):
            break
        refitted = []
        for i, m in enumerate(members):
            face = points[m]
            _, _, vt = np.linalg.svd(face - face.mean(axis=0), full_matrices=False)
            normal = vt[2] if float(vt[2] @ axes[:, i]) >= 0 else -vt[2]
            refitted.append(normal)
        axes = _orthonormal_columns(np.column_stack(refitted))
        levels_arr = np.array([float(np.mean(points[m] @ axes[:, i])) for i, m in enumerate(members)])

    faces = [
        FacePlane(normal=_towards_camera(axes[:, i], points[m]), members=m)
        for i, m in enumerate(members)
        if len(m) >= 3
    ]
    return sorted(faces, key=lambda f: -len(f.members))


def fit_faces(cloud: PointCloud, cfg: PoseConfig | None = None) -> list[FacePlane]:
    """Up to three mutually orthogonal planar faces of the observed surface, largest first."""
    cfg = cfg or PoseConfig()
    points = cloud.points
    min_points = max(cfg.min_face_points, int(cfg.min_face_fraction * len(points)))
    orthogonal = math.sin(math.radians(FACE_ORTHOGONALITY_DEG))
    remaining = np.arange(len(points))
    normals: list[FloatArray] = []
    levels: list[float] = []
    for index in range(3):
        if len(remaining) < min_points:
            break
        plane = fit_plane(
            points[remaining],
            threshold=cfg.face_threshold,
            iterations=cfg.face_iterations,
            sample_size=cfg.face_sample_size,
            rng=make_rng(cfg.seed, FACE_STREAM, index),
        )
        if plane is None:
            break
        normal, offset = plane
        on_plane = np.abs(points[remaining] @ normal + offset) < cfg.face_threshold
        if np.count_nonzero(on_plane) < min_points:
            break
        if any(abs(float(normal @ other)) > orthogonal for other in normals):
            break
        normals.append(normal)
        levels.append(-offset)
        remaining = remaining[~on_plane]
    if not normals:
        return []
    faces = _refine_faces(points, normals, levels, cfg.face_threshold)
    logger.debug("Fitted %d faces to %d points", len(faces), len(points))
    return faces


def _completion(normal: FloatArray) -> FloatArray:
    """Right-handed frame whose third column is ``normal``."""
    helper = np.eye(3)[int(np.argmin(np.abs(normal)))]
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    return np.column_stack((u, np.cross(normal, u), normal))


def box_frame(cloud: PointCloud, cfg: PoseConfig | None = None) -> BoxFrame:
    """Box axes from the visible faces; one face is completed by its footprint rectangle.

    Without any face the PCA frame, aligned to its footprint, is used. Columns are ordered by
    descending spread of the cloud and the frame is right-handed.
    """
    faces = fit_faces(cloud, cfg)
    centroid = cloud.centroid
    if len(faces) >= 2:
        a, b = faces[0].normal, faces[1].normal
        axes = np.column_stack((a, b, np.cross(a, b)))
    elif len(faces) == 1:
        axes = align_to_footprint(cloud, Pose(rotation=_completion(faces[0].normal), translation=centroid)).rotation
    else:
        frame, _ = obb_init(cloud)
        axes = align_to_footprint(cloud, frame).rotation

    spread = np.var((cloud.points - centroid) @ axes, axis=0)
    axes = axes[:, np.argsort(-spread, kind="stable")]
    if np.linalg.det(axes) < 0:
        axes[:, 2] *= -1.0
    return BoxFrame(pose=Pose(rotation=axes, translation=centroid), faces=tuple(faces))


def _matching_face(faces: tuple[FacePlane, ...], direction: FloatArray) -> FacePlane | None:
    for face in faces:
        if abs(float(face.normal @ direction)) >= FACE_MATCH_COS:
            return face
    return None


def anchor_translation(
    rotation: FloatArray, dims: BoxDims, cloud: PointCloud, faces: tuple[FacePlane, ...] = ()
) -> FloatArray:
    """Box center that puts the box's camera-side corner on the observed one.

    An axis with a visible face takes its near plane from that face; any other axis takes the extreme
    of the points on the side nearer the camera. The box extends away from the camera from there, so
    the placement is exact for the true dimensions whatever the others are.
    """
    points = cloud.points
    if len(points) == 0:
        raise EmptyCloudError()
    d = dims.as_array()
    local = np.zeros(3)
    for axis in range(3):
        direction = rotation[:, axis]
        face = _matching_face(faces, direction)
        if face is not None:
            level = float(np.median(points[face.members] @ direction))
            # Face normals point out of the box, towards the camera.
            inward = -math.copysign(1.0, float(face.normal @ direction))
            local[axis] = level + inward * d[axis] / 2
            continue
        projected = points @ direction
        k = min(EXTREME_RANK, len(projected) - 1)
        low = float(np.partition(projected, k)[k])
        high = float(-np.partition(-projected, k)[k])
        local[axis] = low + d[axis] / 2 if abs(low) <= abs(high) else high - d[axis] / 2
    return rotation @ local


def nearest_symmetric_rotation(rotation: FloatArray, target: FloatArray) -> FloatArray:
    """The cube-symmetric variant of ``rotation`` closest to ``target``."""
    return min(
        (np.asarray(rotation) @ g for g in OCTAHEDRAL_ROTATIONS),
        key=lambda candidate: rotation_angle_deg(candidate, target),
    )


def enumerate_hypotheses(frame: Pose) -> list[Hypothesis]:
    """The 24 cube-symmetric rotations of the frame sharing its translation, uniform confidence."""
    return [
        Hypothesis(pose=Pose(rotation=frame.rotation @ g, translation=frame.translation), confidence=1.0, label=i)
        for i, g in enumerate(OCTAHEDRAL_ROTATIONS)
    ]


def _rank(centered: FloatArray) -> int:
    singular = np.linalg.svd(centered, compute_uv=False)
    if singular[0] <= 1e-12:
        return 0
    return int(np.count_nonzero(singular > 1e-9 * singular[0]))


def kabsch(src: PointCloud | ArrayLike, dst: PointCloud | ArrayLike) -> Pose:
    """Least-squares rigid transform T with T(src) ~ dst."""
    a, b = _points(src), _points(dst)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"point counts differ: {len(a)} vs {len(b)}")
    if len(a) < 3:
        raise InvalidArgumentError(f"kabsch needs at least 3 correspondences, got {len(a)}")

    centroid_a = a.mean(axis=0)
    centroid_b = b.mean(axis=0)
    centered_a = a - centroid_a
    centered_b = b - centroid_b
    if _rank(centered_a) < 2 or _rank(centered_b) < 2:
        raise RankError("correspondences are collinear")

    u, _, vt = np.linalg.svd(centered_a.T @ centered_b)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    translation = centroid_b - rotation @ centroid_a
    return Pose(rotation=rotation, translation=translation)


def closest_surface_points(points: ArrayLike, dims: BoxDims, pose: Pose) -> FloatArray:
    """Analytic projection of camera-frame points onto the posed cuboid surface."""
    local = pose.to_local(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    half = dims.half
    projected = np.clip(local, -half, half)

    inside = np.all(np.abs(local) <= half, axis=1)
    if inside.any():
        slack = half - np.abs(local[inside])
        axis = slack.argmin(axis=1)
        rows = np.nonzero(inside)[0]
        signs = np.where(local[rows, axis] < 0, -1.0, 1.0)
        projected[rows, axis] = signs * half[axis]
    return pose.transform(projected)


def surface_distance(points: ArrayLike, dims: BoxDims, pose: Pose) -> FloatArray:
    local = pose.to_local(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    q = np.abs(local) - dims.half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = -np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def score_hypothesis(
    h: Hypothesis, cloud: PointCloud, dims: BoxDims, *, delta: float = DEFAULT_SCORE_DELTA
) -> float:
    """Fraction of cloud points within delta of the posed box surface."""
    if len(cloud) == 0:
        return 0.0
    distances = surface_distance(cloud.points, dims, h.pose)
    return float(np.count_nonzero(distances <= delta)) / len(cloud)


def _inlier_rmse(points: FloatArray, dims: BoxDims, pose: Pose, max_distance: float) -> float:
    distances = surface_distance(points, dims, pose)
    inliers = distances[distances <= max_distance]
    if inliers.size == 0:
        return math.inf
    return float(np.sqrt(np.mean(inliers**2)))


def icp_refine(cloud: PointCloud, dims: BoxDims, init: Pose, cfg: IcpConfig | None = None) -> IcpResult:
    """Point-to-cuboid ICP; always returns the lowest-RMSE iterate."""
    cfg = cfg or IcpConfig()
    if len(cloud) == 0:
        raise EmptyCloudError()
    points = cloud.points

    pose = init
    best_pose, best_rmse = init, _inlier_rmse(points, dims, init, cfg.max_correspondence_distance)
    previous_rmse = best_rmse
    worsening = 0
    iterations = 0
    converged = False

    for iterations in range(1, cfg.max_iterations + 1):
        targets = closest_surface_points(points, dims, pose)
        residuals = np.linalg.norm(points - targets, axis=1)
        inliers = residuals <= cfg.max_correspondence_distance
        if np.count_nonzero(inliers) < 3:
            logger.debug("ICP stopped: %d inliers", int(np.count_nonzero(inliers)))
            break
        try:
            update = kabsch(targets[inliers], points[inliers])
        except RankError:
            logger.debug("ICP stopped: degenerate correspondences at iteration %d", iterations)
            break
        pose = compose(update, pose)

        rmse = _inlier_rmse(points, dims, pose, cfg.max_correspondence_distance)
        if rmse < best_rmse:
            best_pose, best_rmse = pose, rmse
        worsening = worsening + 1 if rmse > previous_rmse else 0
        previous_rmse = rmse
        if worsening >= cfg.divergence_patience:
            logger.debug("ICP diverged after %d iterations", iterations)
            break

        step_deg = rotation_angle_deg(update.rotation, np.eye(3))
        if step_deg < cfg.rotation_tol_deg and float(np.linalg.norm(update.translation)) < cfg.translation_tol:
            converged = True
            break

    return IcpResult(pose=best_pose, rmse=best_rmse, converged=converged, iterations=iterations)
