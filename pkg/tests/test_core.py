from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from box6d.exceptions import InvalidArgumentError
from box6d.services.core import (
    OCTAHEDRAL_ROTATIONS,
    BoxDims,
    CameraIntrinsics,
    DepthImage,
    InstanceMask,
    Pose,
    ScaleInterval,
    ScaleVec,
    compose,
    dims_to_scale,
    make_rng,
    rotation_angle_deg,
    scaled_template,
)


def test_pose_inverse_and_compose_are_consistent() -> None:
    rotation = Rotation.from_euler("xyz", [10, -25, 40], degrees=True).as_matrix()
    pose = Pose(rotation=rotation, translation=[0.1, -0.2, 1.5])

    identity = compose(pose, pose.inverse())

    assert np.allclose(identity.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(identity.translation, 0.0, atol=1e-12)
    assert np.allclose(Pose.from_matrix(pose.as_matrix()).rotation, pose.rotation)
    points = np.array([[0.1, 0.2, 0.3], [-0.5, 0.0, 0.25]])
    assert np.allclose(pose.to_local(pose.transform(points)), points)


def test_pose_rejects_improper_rotation() -> None:
    with pytest.raises(InvalidArgumentError):
        Pose(rotation=np.diag([1.0, 1.0, -1.0]), translation=np.zeros(3))


def test_rotation_angle_of_quarter_turn() -> None:
    quarter = Rotation.from_euler("z", 90, degrees=True).as_matrix()

    assert rotation_angle_deg(np.eye(3), quarter) == pytest.approx(90.0)


def test_scaled_template_round_trips_through_dims_to_scale() -> None:
    s = ScaleVec(0.4, 0.3, 1.2)

    assert dims_to_scale(scaled_template(s)) == s


@pytest.mark.parametrize("values", [(0.0, 1.0, 1.0), (1.0, -0.2, 1.0), (1.0, 1.0, float("nan"))])
def test_non_positive_dimensions_are_rejected(values: tuple[float, float, float]) -> None:
    with pytest.raises(InvalidArgumentError):
        BoxDims.from_array(values)


def test_scale_interval_width_and_midpoint() -> None:
    interval = ScaleInterval(lo=[0.05, 0.05, 0.05], hi=[2.0, 1.0, 0.05])

    assert np.allclose(interval.width, [1.95, 0.95, 0.0])
    assert np.allclose(interval.midpoint, [1.025, 0.525, 0.05])
    with pytest.raises(InvalidArgumentError):
        ScaleInterval(lo=[1.0, 1.0, 1.0], hi=[0.5, 2.0, 2.0])


def test_camera_principal_point_must_be_inside_image() -> None:
    with pytest.raises(InvalidArgumentError):
        CameraIntrinsics(fx=500, fy=500, cx=400, cy=120, width=320, height=240)


def test_depth_and_mask_validate_their_size() -> None:
    with pytest.raises(InvalidArgumentError):
        DepthImage(width=2, height=2, data=np.zeros(3))
    mask = InstanceMask(width=2, height=2, data=[[0, 3], [3, 1]])

    assert mask.instance_ids() == [1, 3]
    assert mask.count(3) == 2
    assert mask.select().sum() == 3


def test_octahedral_rotations_are_the_24_proper_cube_symmetries() -> None:
    assert len(OCTAHEDRAL_ROTATIONS) == 24
    assert np.array_equal(OCTAHEDRAL_ROTATIONS[0], np.eye(3))
    assert all(np.linalg.det(g) == pytest.approx(1.0) for g in OCTAHEDRAL_ROTATIONS)
    assert len({g.tobytes() for g in OCTAHEDRAL_ROTATIONS}) == 24


def test_rng_streams_are_reproducible_and_independent() -> None:
    first = make_rng(7, 1, 0).random(4)

    assert np.array_equal(first, make_rng(7, 1, 0).random(4))
    assert not np.array_equal(first, make_rng(7, 1, 1).random(4))
    assert not np.array_equal(first, make_rng(8, 1, 0).random(4))
