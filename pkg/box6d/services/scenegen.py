from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
import logging
import math

import numpy as np
from scipy.spatial.transform import Rotation

from box6d.exceptions import PlacementError
from box6d.schemas import SceneConfig
from box6d.services.core import (
    OCTAHEDRAL_ROTATIONS,
    BoxDims,
    BoxInstance,
    CameraIntrinsics,
    DepthImage,
    FloatArray,
    InstanceMask,
    Pose,
    make_rng,
)
from box6d.services.render import box_corners, render_view

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 1000
OCCLUDER_GAP = 0.15
OCCLUDER_THICKNESS = 0.02

# Substream ids under the scene seed.
BOX_STREAM = 1
OCCLUDER_STREAM = 2
NOISE_STREAM = 3
LAYOUT_STREAM = 4
RELABEL_STREAM = 5

Placement = tuple[Pose, BoxDims]


@dataclass(frozen=True, slots=True, eq=False)
class Scene:
    """A composited depth frame with visibility-resolved instance labels and ground truth."""

    depth: DepthImage
    masks: InstanceMask
    gt: tuple[BoxInstance, ...]
    camera: CameraIntrinsics

    def gt_for(self, instance_id: int) -> BoxInstance:
        for box in self.gt:
            if box.instance_id == instance_id:
                return box
        raise KeyError(instance_id)


def boxes_separated(a: Placement, b: Placement, *, eps: float = 1e-9) -> bool:
    """Separating-axis test for two oriented boxes; touching faces count as separated."""
    (pose_a, dims_a), (pose_b, dims_b) = a, b
    axes_a, axes_b = pose_a.rotation, pose_b.rotation
    half_a, half_b = dims_a.half, dims_b.half
    offset = pose_b.translation - pose_a.translation

    candidates = [axes_a[:, i] for i in range(3)] + [axes_b[:, j] for j in range(3)]
    for i in range(3):
        for j in range(3):
            cross = np.cross(axes_a[:, i], axes_b[:, j])
            norm = np.linalg.norm(cross)
            if norm > 1e-9:
                candidates.append(cross / norm)

    for axis in candidates:
        reach_a = float(np.sum(half_a * np.abs(axis @ axes_a)))
        reach_b = float(np.sum(half_b * np.abs(axis @ axes_b)))
        if abs(float(axis @ offset)) >= reach_a + reach_b - eps:
            return True
    return False


def _in_view(corners: FloatArray, K: CameraIntrinsics) -> bool:
    if np.any(corners[:, 2] <= 0):
        return False
    u = K.fx * corners[:, 0] / corners[:, 2] + K.cx
    v = K.fy * corners[:, 1] / corners[:, 2] + K.cy
    return bool(np.all((u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)))


def _view_bounds(K: CameraIntrinsics, z: float) -> tuple[float, float, float, float]:
    return (
        -K.cx * z / K.fx,
        (K.width - 1 - K.cx) * z / K.fx,
        -K.cy * z / K.fy,
        (K.height - 1 - K.cy) * z / K.fy,
    )


def _sample_dims(rng: np.random.Generator, cfg: SceneConfig) -> BoxDims:
    return BoxDims.from_array(rng.uniform(cfg.dims_min, cfg.dims_max))


def _sample_free_box(
    rng: np.random.Generator, cfg: SceneConfig, K: CameraIntrinsics, rotation: FloatArray
) -> Placement | None:
    dims = _sample_dims(rng, cfg)
    reach = np.abs(rotation) @ dims.half
    z_front = rng.uniform(*cfg.depth_range)
    x_lo, x_hi, y_lo, y_hi = _view_bounds(K, z_front)
    if x_hi - x_lo <= 2 * reach[0] or y_hi - y_lo <= 2 * reach[1]:
        return None
    center = np.array(
        [
            rng.uniform(x_lo + reach[0], x_hi - reach[0]),
            rng.uniform(y_lo + reach[1], y_hi - reach[1]),
            z_front + reach[2],
        ]
    )
    pose = Pose(rotation=rotation, translation=center)
    if not _in_view(box_corners(dims, pose), K):
        return None
    return pose, dims


def _place_independently(
    cfg: SceneConfig,
    K: CameraIntrinsics,
    rotation_sampler: Callable[[np.random.Generator], FloatArray],
) -> list[Placement]:
    placed: list[Placement] = []
    attempts = 0
    for index in range(cfg.n_boxes):
        rng = make_rng(cfg.seed, BOX_STREAM, index)
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise PlacementError(n_boxes=cfg.n_boxes, attempts=MAX_PLACEMENT_ATTEMPTS)
            candidate = _sample_free_box(rng, cfg, K, rotation_sampler(rng))
            if candidate is not None and all(boxes_separated(candidate, other) for other in placed):
                placed.append(candidate)
                break
    return placed


def _single_rotation(cfg: SceneConfig) -> Callable[[np.random.Generator], FloatArray]:
    """Upright box turned about the vertical and pitched so its top face shows; zero ranges keep it frontal."""
    yaw_range = tuple(math.radians(v) for v in cfg.yaw_range_deg)
    pitch_range = tuple(math.radians(v) for v in cfg.pitch_range_deg)

    def sample(rng: np.random.Generator) -> FloatArray:
        yaw = rng.uniform(*yaw_range) * rng.choice((-1.0, 1.0))
        pitch = rng.uniform(*pitch_range)
        # Extrinsic y then x: a positive pitch turns the top (-y) face towards the camera.
        return Rotation.from_euler("yx", [yaw, pitch]).as_matrix()

    return sample


def _pile_rotation(cfg: SceneConfig) -> Callable[[np.random.Generator], FloatArray]:
    max_tilt = math.radians(cfg.max_tilt_deg)

    def sample(rng: np.random.Generator) -> FloatArray:
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        tilt = rng.uniform(0.0, max_tilt)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        tilt_vector = tilt * np.array([math.cos(heading), 0.0, math.sin(heading)])
        # Camera y points down, so yaw about y keeps boxes upright.
        rotation = Rotation.from_rotvec(tilt_vector) * Rotation.from_euler("y", yaw)
        return rotation.as_matrix()

    return sample


def _place_single(cfg: SceneConfig, K: CameraIntrinsics) -> list[Placement]:
    return _place_independently(cfg, K, _single_rotation(cfg))


def _place_pile(cfg: SceneConfig, K: CameraIntrinsics) -> list[Placement]:
    return _place_independently(cfg, K, _pile_rotation(cfg))


def _place_stack(cfg: SceneConfig, K: CameraIntrinsics) -> list[Placement]:
    """One column, boxes face to face, sharing x and the front plane; box 1 at the bottom."""
    box_rngs = [make_rng(cfg.seed, BOX_STREAM, i) for i in range(cfg.n_boxes)]
    layout_rng = make_rng(cfg.seed, LAYOUT_STREAM)

    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        dims = [_sample_dims(rng, cfg) for rng in box_rngs]
        z_front = layout_rng.uniform(*cfg.depth_range)
        x_lo, x_hi, y_lo, y_hi = _view_bounds(K, z_front)
        height = sum(d.dy for d in dims)
        width = max(d.dx for d in dims)
        if x_hi - x_lo <= width or y_hi - y_lo <= height:
            continue
        x = layout_rng.uniform(x_lo + width / 2, x_hi - width / 2)
        floor = layout_rng.uniform(y_lo + height, y_hi)

        placed: list[Placement] = []
        top = floor
        for d in dims:
            center = np.array([x, top - d.dy / 2, z_front + d.dz / 2])
            placed.append((Pose(rotation=np.eye(3), translation=center), d))
            top -= d.dy
        if all(_in_view(box_corners(d, p), K) for p, d in placed):
            return placed
    raise PlacementError(n_boxes=cfg.n_boxes, attempts=MAX_PLACEMENT_ATTEMPTS)


_PLACERS: dict[str, Callable[[SceneConfig, CameraIntrinsics], list[Placement]]] = {
    "single": _place_single,
    "stack": _place_stack,
    "pile": _place_pile,
}


def relabel_axes(placed: list[Placement], seed: int) -> list[Placement]:
    """Same physical boxes with each one's axes renamed by a random cube symmetry.

    Axis k of a relabelled box is one of the original axes, so the dimensions are permuted with it.
    """
    rng = make_rng(seed, RELABEL_STREAM)
    relabelled = []
    for pose, dims in placed:
        g = OCTAHEDRAL_ROTATIONS[int(rng.integers(len(OCTAHEDRAL_ROTATIONS)))]
        renamed = BoxDims.from_array(np.abs(g).T @ dims.as_array())
        relabelled.append((Pose(rotation=pose.rotation @ g, translation=pose.translation), renamed))
    return relabelled


def _occluder(cfg: SceneConfig, K: CameraIntrinsics, placed: list[Placement]) -> Placement | None:
    """Vertical post in front of the nearest box; its position depends only on the seed."""
    if cfg.occlusion_level <= 0 or not placed:
        return None
    rng = make_rng(cfg.seed, OCCLUDER_STREAM)
    shift = rng.uniform(-0.5, 0.5)

    nearest_pose, nearest_dims = min(placed, key=lambda p: float(box_corners(p[1], p[0])[:, 2].min()))
    front = float(box_corners(nearest_dims, nearest_pose)[:, 2].min())
    z = max(front - OCCLUDER_GAP, 2 * OCCLUDER_THICKNESS)
    _, _, y_lo, y_hi = _view_bounds(K, z)
    width = cfg.occlusion_level * cfg.occluder_max_width
    center = np.array(
        [nearest_pose.translation[0] + shift * nearest_dims.dx, 0.5 * (y_lo + y_hi), z - OCCLUDER_THICKNESS / 2]
    )
    dims = BoxDims(width, 2.0 * (y_hi - y_lo), OCCLUDER_THICKNESS)
    return Pose(rotation=np.eye(3), translation=center), dims


def _composite(
    gt: tuple[BoxInstance, ...], occluder: Placement | None, K: CameraIntrinsics, cfg: SceneConfig
) -> tuple[FloatArray, np.ndarray]:
    zbuffer = np.full(K.shape, np.inf)
    labels = np.zeros(K.shape, dtype=np.int32)
    if cfg.background_depth is not None:
        zbuffer[:] = cfg.background_depth

    layers = [(box.instance_id, box.pose, box.dims) for box in gt]
    if occluder is not None:
        layers.append((0, *occluder))
    for label, pose, dims in layers:
        view = render_view(dims, pose, K)
        closer = (view.mask.data > 0) & (view.depth.data < zbuffer)
        zbuffer[closer] = view.depth.data[closer]
        labels[closer] = label
    return np.where(np.isfinite(zbuffer), zbuffer, 0.0), labels


def _apply_sensor_model(depth: FloatArray, labels: np.ndarray, cfg: SceneConfig) -> None:
    if cfg.depth_noise_sigma > 0:
        rng = make_rng(cfg.seed, NOISE_STREAM)
        valid = depth > 0
        depth[valid] += rng.normal(0.0, cfg.depth_noise_sigma, size=int(np.count_nonzero(valid)))
        np.maximum(depth, 0.0, out=depth)
        dropped = valid & (rng.random(depth.shape) < cfg.dropout_fraction)
        depth[dropped] = 0.0
    if cfg.quantize_mm:
        np.round(depth * 1000.0, out=depth)
        depth /= 1000.0
    labels[depth <= 0] = 0


def generate_scene(cfg: SceneConfig) -> Scene:
    """Deterministic synthetic frame: every random draw comes from a substream of ``cfg.seed``."""
    K = cfg.camera.to_intrinsics()
    placed = _PLACERS[cfg.stack_layout](cfg, K)
    occluder = _occluder(cfg, K, placed)
    if cfg.relabel_axes:
        placed = relabel_axes(placed, cfg.seed)
    gt = tuple(BoxInstance(instance_id=i + 1, pose=pose, dims=dims) for i, (pose, dims) in enumerate(placed))

    depth, labels = _composite(gt, occluder, K, cfg)
    _apply_sensor_model(depth, labels, cfg)
    logger.debug("Generated %s scene with %d boxes (seed %d)", cfg.stack_layout, len(gt), cfg.seed)
    return Scene(
        depth=DepthImage(width=K.width, height=K.height, data=depth),
        masks=InstanceMask(width=K.width, height=K.height, data=labels),
        gt=gt,
        camera=K,
    )
