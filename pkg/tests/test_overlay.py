from __future__ import annotations

from pathlib import Path

import numpy as np

from box6d.services.core import Pose
from box6d.services.dataset_io import PNG_SIGNATURE
from box6d.services.overlay import colorize_depth, draw_box, render_overlay, write_overlay
from box6d.services.scenegen import Scene


def test_colorized_depth_is_black_where_missing(frontal_scene: Scene) -> None:
    image = colorize_depth(frontal_scene.depth)

    assert image.shape == (*frontal_scene.camera.shape, 3)
    assert image.dtype == np.uint8
    assert not image[~frontal_scene.depth.valid].any()
    assert image[frontal_scene.depth.valid].any(axis=1).all()


def test_overlay_draws_estimates_and_ground_truth(frontal_scene: Scene) -> None:
    box = frontal_scene.gt[0]
    base = colorize_depth(frontal_scene.depth)

    image = render_overlay(frontal_scene.depth, frontal_scene.camera, [(box.pose, box.dims)], [(box.pose, box.dims)])

    assert np.any(image != base)


def test_box_behind_the_camera_is_skipped(frontal_scene: Scene) -> None:
    image = colorize_depth(frontal_scene.depth)
    behind = Pose(rotation=np.eye(3), translation=[0.0, 0.0, -2.0])

    assert not draw_box(image, behind, frontal_scene.gt[0].dims, frontal_scene.camera, (255, 255, 255))
    assert np.array_equal(image, colorize_depth(frontal_scene.depth))


def test_overlay_is_written_as_png(tmp_path: Path, frontal_scene: Scene) -> None:
    path = tmp_path / "overlays" / "scene_0000.png"

    write_overlay(path, colorize_depth(frontal_scene.depth))

    assert path.read_bytes().startswith(PNG_SIGNATURE)
