from __future__ import annotations

from pathlib import Path
import sys

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from box6d.services.core import BoxDims, BoxInstance, CameraIntrinsics, DepthImage, InstanceMask, Pose  # noqa: E402
from box6d.services.render import render_view  # noqa: E402
from box6d.services.scenegen import Scene  # noqa: E402

FRONT_DEPTH = 1.4
# Slightly off the optical axis so no pixel centre lies exactly on a projected face diagonal.
CENTER_X = 0.013
CENTER_Y = -0.021


@pytest.fixture
def camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=160.0, cy=120.0, width=320, height=240)


def frontal_pose(dims: BoxDims, x: float = CENTER_X, y: float = CENTER_Y, front: float = FRONT_DEPTH) -> Pose:
    """Axis-aligned box whose camera-facing face lies on the plane z = front."""
    return Pose(rotation=np.eye(3), translation=np.array([x, y, front + dims.dz / 2]))


def render_scene(
    boxes: list[tuple[Pose, BoxDims]], K: CameraIntrinsics, background: float | None = None
) -> Scene:
    """Noiseless composited scene straight from the renderer."""
    zbuffer = np.full(K.shape, np.inf if background is None else background)
    labels = np.zeros(K.shape, dtype=np.int32)
    for label, (pose, dims) in enumerate(boxes, start=1):
        view = render_view(dims, pose, K)
        closer = (view.mask.data > 0) & (view.depth.data < zbuffer)
        zbuffer[closer] = view.depth.data[closer]
        labels[closer] = label
    depth = np.where(np.isfinite(zbuffer), zbuffer, 0.0)
    return Scene(
        depth=DepthImage(width=K.width, height=K.height, data=depth),
        masks=InstanceMask(width=K.width, height=K.height, data=labels),
        gt=tuple(BoxInstance(i, pose, dims) for i, (pose, dims) in enumerate(boxes, start=1)),
        camera=K,
    )


@pytest.fixture
def frontal_dims() -> BoxDims:
    return BoxDims(0.4, 0.3, 0.25)


@pytest.fixture
def frontal_scene(camera: CameraIntrinsics, frontal_dims: BoxDims) -> Scene:
    return render_scene([(frontal_pose(frontal_dims), frontal_dims)], camera)


class FakePoseEstimator:
    """Places the template flush with a known front plane, centred on a known point."""

    def __init__(self, x: float = CENTER_X, y: float = CENTER_Y, front: float = FRONT_DEPTH) -> None:
        self.x = x
        self.y = y
        self.front = front
        self.calls: list[BoxDims] = []

    def __call__(self, dims: BoxDims, previous: Pose | None) -> Pose:
        self.calls.append(dims)
        return frontal_pose(dims, self.x, self.y, self.front)
