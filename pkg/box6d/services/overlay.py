from __future__ import annotations

from collections.abc import Iterable
import logging
from pathlib import Path

import cv2
import numpy as np

from box6d.exceptions import BehindCameraError, DatasetIOError
from box6d.services.core import BoxDims, CameraIntrinsics, DepthImage, Pose
from box6d.services.render import BOX_EDGES, box_corners, project_points

logger = logging.getLogger(__name__)

ESTIMATE_COLOR = (0, 200, 0)
GT_COLOR = (0, 0, 220)


def colorize_depth(depth: DepthImage) -> np.ndarray:
    """False-colour BGR image of the valid depth range; missing pixels stay black."""
    values = depth.data
    valid = depth.valid
    image = np.zeros((*values.shape, 3), dtype=np.uint8)
    if not valid.any():
        return image
    lo, hi = float(values[valid].min()), float(values[valid].max())
    scaled = np.zeros(values.shape, dtype=np.uint8)
    scaled[valid] = np.clip(255.0 * (hi - values[valid]) / max(hi - lo, 1e-9), 0, 255).astype(np.uint8)
    colored = cv2.applyColorMap(scaled, cv2.COLORMAP_JET)
    image[valid] = colored[valid]
    return image


def draw_box(image: np.ndarray, pose: Pose, dims: BoxDims, K: CameraIntrinsics, color: tuple[int, int, int]) -> bool:
    try:
        pixels = project_points(K, box_corners(dims, pose))
    except BehindCameraError:
        return False
    points = np.rint(pixels).astype(np.int64)
    for a, b in BOX_EDGES:
        cv2.line(image, tuple(map(int, points[a])), tuple(map(int, points[b])), color, 1, cv2.LINE_AA)
    return True


def render_overlay(
    depth: DepthImage,
    K: CameraIntrinsics,
    estimates: Iterable[tuple[Pose, BoxDims]],
    gt: Iterable[tuple[Pose, BoxDims]] = (),
) -> np.ndarray:
    image = colorize_depth(depth)
    for pose, dims in gt:
        draw_box(image, pose, dims, K, GT_COLOR)
    for pose, dims in estimates:
        if not draw_box(image, pose, dims, K, ESTIMATE_COLOR):
            logger.warning("Estimated box at %s is behind the camera; not drawn", pose.translation)
    return image


def write_overlay(path: Path, image: np.ndarray) -> None:
    ok, encoded = cv2.imencode(".png", image)
    if not ok:
        raise DatasetIOError(path, "PNG encoding failed")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encoded.tobytes())
    except OSError as exc:
        raise DatasetIOError(path, f"cannot write: {exc.strerror or exc}") from exc
