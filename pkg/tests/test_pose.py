from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from box6d.exceptions import DegenerateCloudError, EmptyCloudError, InvalidArgumentError, RankError
from box6d.schemas import IcpConfig
from box6d.services.core import (
    OCTAHEDRAL_ROTATIONS,
    ORTHONORMAL_TOL,
    BoxDims,
    CameraIntrinsics,
    Hypothesis,
    PointCloud,
    Pose,
    make_rng,
    rotation_angle_deg,
)
from box6d.services.metrics import rotation_error_sym
from box6d.services.pose import (
    anchor_translation,
    backproject,
    box_frame,
    closest_surface_points,
    enumerate_hypotheses,
    fit_faces,
    icp_refine,
    kabsch,
    nearest_symmetric_rotation,
    obb_init,
    score_hypothesis,
    surface_distance,
)
from box6d.services.scenegen import Scene
from conftest import render_scene

TILTED_DIMS = BoxDims(0.4, 0.3, 0.25)
TILTED_POSE = Pose(
    rotation=Rotation.from_euler("yx", [35.0, 25.0], degrees=True).as_matrix(), translation=[0.01, -0.02, 1.6]
)


def surface_samples(dims: BoxDims, pose: Pose, n: int, seed: int = 0) -> np.ndarray:
    """Points spread over all six faces of the posed box."""
    rng = make_rng(seed, 42)
    local = rng.uniform(-1.0, 1.0, size=(n, 3)) * dims.half
    axis = rng.integers(0, 3, size=n)
    local[np.arange(n), axis] = np.where(rng.random(n) < 0.5, -1.0, 1.0) * dims.half[axis]
    return pose.transform(local)


@pytest.mark.parametrize("seed", range(100))
def test_kabsch_recovers_rigid_transform(seed: int) -> None:
    rng = make_rng(seed, 11)
    expected = Pose(rotation=Rotation.random(random_state=seed).as_matrix(), translation=rng.uniform(-1, 1, 3))
    src = rng.uniform(-0.5, 0.5, size=(20, 3))

    recovered = kabsch(src, expected.transform(src))

    assert np.allclose(recovered.rotation, expected.rotation, atol=1e-10, rtol=0.0)
    assert np.allclose(recovered.translation, expected.translation, atol=1e-9, rtol=0.0)


def test_kabsch_never_returns_a_reflection() -> None:
    src = make_rng(3, 11).uniform(-0.5, 0.5, size=(10, 3))
    mirrored = src * np.array([1.0, 1.0, -1.0])

    assert np.linalg.det(kabsch(src, mirrored).rotation) == pytest.approx(1.0)


def test_kabsch_rejects_bad_correspondences() -> None:
    with pytest.raises(InvalidArgumentError):
        kabsch(np.zeros((4, 3)), np.zeros((5, 3)))
    with pytest.raises(InvalidArgumentError):
        kabsch(np.eye(3)[:2], np.eye(3)[:2])
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(RankError):
        kabsch(line, line)


def test_backproject_inverts_projection(frontal_scene: Scene) -> None:
    cloud = backproject(frontal_scene.depth, frontal_scene.masks, 1, frontal_scene.camera)

    assert len(cloud) == frontal_scene.masks.count(1)
    assert np.allclose(cloud.points[:, 2], 1.4)


def test_backproject_of_missing_instance_raises(frontal_scene: Scene) -> None:
    with pytest.raises(EmptyCloudError):
        backproject(frontal_scene.depth, frontal_scene.masks, 7, frontal_scene.camera)


def test_obb_init_orders_axes_by_variance() -> None:
    dims = BoxDims(0.6, 0.3, 0.1)
    rotation = Rotation.from_euler("z", 20, degrees=True).as_matrix()
    pose = Pose(rotation=rotation, translation=[0.1, 0.0, 2.0])
    cloud = PointCloud(surface_samples(dims, pose, 5000))

    frame, half = obb_init(cloud)

    assert np.linalg.det(frame.rotation) == pytest.approx(1.0)
    assert abs(frame.rotation[:, 0] @ rotation[:, 0]) > 0.99
    assert half[0] > half[1] > half[2]
    assert np.allclose(frame.translation, pose.translation, atol=0.01)


def test_obb_init_rejects_small_and_collinear_clouds() -> None:
    with pytest.raises(InvalidArgumentError):
        obb_init(PointCloud(np.zeros((5, 3))))
    with pytest.raises(DegenerateCloudError):
        obb_init(PointCloud(np.outer(np.linspace(0.0, 1.0, 20), [1.0, 0.0, 0.0])))


def test_planar_cloud_is_accepted(frontal_scene: Scene) -> None:
    cloud = backproject(frontal_scene.depth, frontal_scene.masks, 1, frontal_scene.camera)

    frame, half = obb_init(cloud)

    assert abs(frame.rotation[:, 2] @ np.array([0.0, 0.0, 1.0])) == pytest.approx(1.0, abs=1e-6)
    assert half[2] == pytest.approx(0.0, abs=1e-9)


def test_enumerate_hypotheses_yields_24_distinct_rotations() -> None:
    hypotheses = enumerate_hypotheses(Pose.identity())

    assert len(hypotheses) == 24
    assert [h.label for h in hypotheses] == list(range(24))
    assert all(h.confidence == 1.0 for h in hypotheses)
    assert len({np.round(h.pose.rotation, 6).tobytes() for h in hypotheses}) == 24


def test_surface_distance_and_projection() -> None:
    dims = BoxDims(0.4, 0.2, 0.2)
    pose = Pose.identity()
    points = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 0.05, 0.0]])

    assert np.allclose(surface_distance(points, dims, pose), [0.1, 0.3, 0.05])
    assert np.allclose(closest_surface_points(points[1:], dims, pose), [[0.2, 0.0, 0.0], [0.0, 0.1, 0.0]])


def test_score_rewards_the_true_pose(frontal_scene: Scene, camera: CameraIntrinsics) -> None:
    cloud = backproject(frontal_scene.depth, frontal_scene.masks, 1, camera)
    gt = frontal_scene.gt[0]
    shifted = Pose(rotation=gt.pose.rotation, translation=gt.pose.translation + [0.0, 0.0, 0.05])

    assert score_hypothesis(Hypothesis(gt.pose, 1.0), cloud, gt.dims) == pytest.approx(1.0)
    assert score_hypothesis(Hypothesis(shifted, 1.0), cloud, gt.dims) == pytest.approx(0.0)


@pytest.fixture
def tilted_cloud(camera: CameraIntrinsics) -> PointCloud:
    scene = render_scene([(TILTED_POSE, TILTED_DIMS)], camera)
    return backproject(scene.depth, scene.masks, 1, camera)


def test_fit_faces_finds_the_three_visible_faces(tilted_cloud: PointCloud) -> None:
    faces = fit_faces(tilted_cloud)

    assert len(faces) == 3
    assert [len(f.members) for f in faces] == sorted((len(f.members) for f in faces), reverse=True)
    for face in faces:
        alignment = np.abs(TILTED_POSE.rotation.T @ face.normal)
        assert alignment.max() == pytest.approx(1.0, abs=1e-4)
        # Normals point out of the box, at the camera.
        assert float(face.normal @ tilted_cloud.points[face.members].mean(axis=0)) < 0


def test_box_frame_is_orthonormal_and_matches_the_box(tilted_cloud: PointCloud) -> None:
    frame = box_frame(tilted_cloud)
    rotation = frame.pose.rotation

    assert np.abs(rotation.T @ rotation - np.eye(3)).max() <= ORTHONORMAL_TOL
    assert np.linalg.det(rotation) == pytest.approx(1.0, abs=ORTHONORMAL_TOL)
    snapped = nearest_symmetric_rotation(rotation, TILTED_POSE.rotation)
    assert rotation_angle_deg(snapped, TILTED_POSE.rotation) < 0.5


def test_single_face_frame_keeps_the_face_normal(frontal_scene: Scene, camera: CameraIntrinsics) -> None:
    cloud = backproject(frontal_scene.depth, frontal_scene.masks, 1, camera)

    frame = box_frame(cloud)

    assert len(frame.faces) == 1
    # The wide face edge has the largest spread, the normal the smallest.
    assert abs(frame.pose.rotation[0, 0]) == pytest.approx(1.0, abs=1e-6)
    assert abs(frame.pose.rotation[2, 2]) == pytest.approx(1.0, abs=1e-6)


def test_anchor_translation_is_exact_for_true_dimensions(tilted_cloud: PointCloud) -> None:
    frame = box_frame(tilted_cloud)
    rotation = nearest_symmetric_rotation(frame.pose.rotation, TILTED_POSE.rotation)

    center = anchor_translation(rotation, TILTED_DIMS, tilted_cloud, frame.faces)

    assert np.linalg.norm(center - TILTED_POSE.translation) < 0.005


def test_anchor_translation_places_each_axis_from_its_own_length(tilted_cloud: PointCloud) -> None:
    frame = box_frame(tilted_cloud)
    rotation = nearest_symmetric_rotation(frame.pose.rotation, TILTED_POSE.rotation)
    too_deep = BoxDims(TILTED_DIMS.dx, TILTED_DIMS.dy, 0.9)

    exact = anchor_translation(rotation, TILTED_DIMS, tilted_cloud, frame.faces)
    stretched = anchor_translation(rotation, too_deep, tilted_cloud, frame.faces)

    offset = rotation.T @ (stretched - exact)
    # The near corner stays put; only the centre's position along the stretched axis moves, by half the excess.
    assert offset[:2] == pytest.approx([0.0, 0.0], abs=1e-9)
    assert abs(offset[2]) == pytest.approx((0.9 - TILTED_DIMS.dz) / 2, abs=1e-9)


def test_anchor_translation_of_empty_cloud_raises() -> None:
    with pytest.raises(EmptyCloudError):
        anchor_translation(np.eye(3), TILTED_DIMS, PointCloud())


def test_nearest_symmetric_rotation_undoes_a_relabelling() -> None:
    g = OCTAHEDRAL_ROTATIONS[13]

    restored = nearest_symmetric_rotation(TILTED_POSE.rotation @ g, TILTED_POSE.rotation)

    assert np.allclose(restored, TILTED_POSE.rotation, atol=1e-12)



def test_icp_fixed_point() -> None:
    dims = BoxDims(0.4, 0.3, 0.2)
    pose = Pose(rotation=Rotation.from_euler("xyz", [10, 20, 30], degrees=True).as_matrix(), translation=[0, 0, 2])
    cloud = PointCloud(surface_samples(dims, pose, 3000))

    result = icp_refine(cloud, dims, pose)

    assert result.converged
    assert result.rmse == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(result.pose.as_matrix(), pose.as_matrix(), atol=1e-9)


def test_icp_recovers_small_perturbation() -> None:
    dims = BoxDims(0.4, 0.3, 0.2)
    truth = Pose(rotation=Rotation.from_euler("xyz", [10, 20, 30], degrees=True).as_matrix(), translation=[0, 0, 2])
    cloud = PointCloud(surface_samples(dims, truth, 3000))
    nudge = Pose(rotation=Rotation.from_euler("z", 3, degrees=True).as_matrix(), translation=[0.01, -0.005, 0.0])
    init = Pose(rotation=nudge.rotation @ truth.rotation, translation=truth.translation + nudge.translation)

    result = icp_refine(cloud, dims, init, IcpConfig(max_iterations=100))

    assert rotation_error_sym(result.pose.rotation, truth.rotation, dims) < 1.0
    assert np.linalg.norm(result.pose.translation - truth.translation) < 0.005


def test_icp_on_empty_cloud_raises() -> None:
    with pytest.raises(EmptyCloudError):
        icp_refine(PointCloud(), BoxDims(1, 1, 1), Pose.identity())