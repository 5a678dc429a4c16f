from __future__ import annotations

import numpy as np
import pytest
import torch

from stereo_recon.errors import BehindCameraError, DegenerateShapeError, DomainError, GeometryError
from stereo_recon.geometry import (
    CameraRig,
    Pose,
    UVDGrid,
    apply_pose,
    camera_to_stereo_pixels,
    denormalize_points,
    normalize_to_unit_cube,
    normalize_to_unit_sphere,
    sample_unit_ball_queries,
    uvd_to_camera,
)


def _rig(**overrides: float) -> CameraRig:
    params = dict(fx=140.0, fy=140.0, cx=80.0, cy=60.0, baseline=0.13, width=160, height=120)
    params.update(overrides)
    return CameraRig(**params)


def test_principal_ray_back_projects_onto_optical_axis() -> None:
    rig = _rig()
    np.testing.assert_allclose(uvd_to_camera(rig.cx, rig.cy, 2.0, rig), [0.0, 0.0, 2.0])


def test_unit_focal_pinhole() -> None:
    rig = CameraRig(fx=1.0, fy=1.0, cx=0.0, cy=0.0, baseline=0.1, width=4, height=4)
    np.testing.assert_allclose(uvd_to_camera(1.0, 0.0, 2.0, rig), [2.0, 0.0, 2.0])


def test_non_positive_depth_is_rejected() -> None:
    rig = _rig()
    with pytest.raises(DomainError):
        uvd_to_camera(10.0, 10.0, 0.0, rig)
    with pytest.raises(DomainError):
        uvd_to_camera(np.array([1.0, 2.0]), np.array([1.0, 2.0]), np.array([1.0, -1.0]), rig)


def test_stereo_projection_closed_form() -> None:
    rig = CameraRig(fx=100.0, fy=100.0, cx=64.0, cy=64.0, baseline=0.13, width=128, height=128)
    left, right = camera_to_stereo_pixels(np.array([0.0, 0.0, 1.3]), rig)
    np.testing.assert_allclose(left, [64.0, 64.0])
    np.testing.assert_allclose(right, [54.0, 64.0])


def test_back_projection_round_trip_and_epipolar_rows() -> None:
    rig = _rig()
    rng = np.random.default_rng(0)
    u = rng.uniform(0, rig.width - 1, 1000)
    v = rng.uniform(0, rig.height - 1, 1000)
    d = rng.uniform(0.5, 2.0, 1000)
    points = uvd_to_camera(u, v, d, rig)
    left, right = camera_to_stereo_pixels(points, rig)
    np.testing.assert_allclose(left[:, 0], u, atol=1e-5)
    np.testing.assert_allclose(left[:, 1], v, atol=1e-5)
    assert np.array_equal(left[:, 1], right[:, 1])
    np.testing.assert_allclose(left[:, 0] - right[:, 0], rig.fx * rig.baseline / points[:, 2], atol=1e-9)


def test_projection_behind_camera_raises() -> None:
    with pytest.raises(BehindCameraError):
        camera_to_stereo_pixels(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]), _rig())


def test_torch_back_projection_is_differentiable() -> None:
    rig = _rig()
    u = torch.tensor([10.0, 90.0], dtype=torch.float64, requires_grad=True)
    v = torch.tensor([20.0, 30.0], dtype=torch.float64)
    d = torch.tensor([1.0, 1.5], dtype=torch.float64, requires_grad=True)
    pts = uvd_to_camera(u, v, d, rig)
    assert pts.shape == (2, 3)
    pts.sum().backward()
    assert u.grad is not None and d.grad is not None


def test_invalid_rig_is_rejected() -> None:
    with pytest.raises(GeometryError):
        _rig(fx=0.0)
    with pytest.raises(GeometryError):
        _rig(cx=200.0)
    with pytest.raises(GeometryError):
        _rig(baseline=-0.1)


def test_depth_bins_are_uniform_in_inverse_depth() -> None:
    grid = UVDGrid(U=4, V=3, D=8, d_min=0.5, d_max=2.0)
    inv = 1.0 / grid.depth_centers
    assert np.all(np.diff(grid.depth_centers) > 0)
    np.testing.assert_allclose(np.diff(inv), np.full(7, np.diff(inv)[0]))
    assert grid.depth_centers[0] > 0.5 and grid.depth_centers[-1] < 2.0


def test_cube_corners_normalize_to_unit_sphere() -> None:
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    frame, normalized = normalize_to_unit_sphere(corners)
    np.testing.assert_allclose(frame.center, [0.0, 0.0, 0.0])
    assert frame.radius == pytest.approx(np.sqrt(3.0))
    np.testing.assert_allclose(np.linalg.norm(normalized, axis=1), 1.0)


def test_normalization_round_trip() -> None:
    rng = np.random.default_rng(1)
    cloud = rng.normal(size=(500, 3)) * [0.3, 1.0, 2.0] + [1.0, -2.0, 5.0]
    frame, normalized = normalize_to_unit_sphere(cloud)
    assert np.linalg.norm(normalized, axis=1).max() == pytest.approx(1.0)
    np.testing.assert_allclose(denormalize_points(normalized, frame), cloud, atol=1e-6)

    cube_frame, in_cube = normalize_to_unit_cube(cloud)
    assert np.abs(in_cube).max() == pytest.approx(1.0)
    np.testing.assert_allclose(denormalize_points(in_cube, cube_frame), cloud, atol=1e-6)


def test_degenerate_clouds_raise() -> None:
    with pytest.raises(DegenerateShapeError):
        normalize_to_unit_sphere(np.ones((5, 3)))
    with pytest.raises(DegenerateShapeError):
        normalize_to_unit_sphere(np.zeros((1, 3)))


def test_pose_composition() -> None:
    rng = np.random.default_rng(2)
    a = Pose.random(rng, translation=rng.normal(size=3))
    b = Pose.random(rng, translation=rng.normal(size=3))
    pts = rng.normal(size=(50, 3))
    np.testing.assert_allclose(apply_pose(apply_pose(pts, a), b), apply_pose(pts, b.compose(a)), atol=1e-6)


def test_pose_requires_unit_quaternion() -> None:
    with pytest.raises(GeometryError):
        Pose(rotation=(1.0, 1.0, 0.0, 0.0))
    np.testing.assert_allclose(Pose.identity().matrix(), np.eye(3))


def test_ball_queries_are_seeded_and_uniform() -> None:
    a = sample_unit_ball_queries(100_000, seed=3)
    b = sample_unit_ball_queries(100_000, seed=3)
    assert np.array_equal(a, b)
    norms = np.linalg.norm(a, axis=1)
    assert norms.max() <= 1.0
    assert norms.mean() == pytest.approx(0.75, abs=0.01)
    with pytest.raises(DomainError):
        sample_unit_ball_queries(0, seed=3)


def test_normalization_is_rotation_equivariant_for_symmetric_clouds() -> None:
    rng = np.random.default_rng(3)
    half = rng.normal(size=(100, 3)) * [0.5, 1.0, 0.2]
    center = np.array([0.3, -0.1, 1.2])
    cloud = np.concatenate([half, -half]) + center
    rot = Pose.random(np.random.default_rng(4)).matrix()
    rotated = (cloud - center) @ rot.T + center

    frame, normalized = normalize_to_unit_sphere(cloud)
    frame_r, normalized_r = normalize_to_unit_sphere(rotated)
    assert frame_r.radius == pytest.approx(frame.radius)
    np.testing.assert_allclose(normalized_r, normalized @ rot.T, atol=1e-9)
