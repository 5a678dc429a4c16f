from __future__ import annotations

import numpy as np
import pytest

from stereo_recon.errors import GeometryError
from stereo_recon.geometry import CameraRig
from stereo_recon.mesh import SurfaceMesh
from stereo_recon.render import MeshInstance, rasterize_stereo
from stereo_recon.shapes import (
    PrimitiveShape,
    ShapeKind,
    analytic_occupancy,
    random_shape,
    sample_surface_points,
    signed_distance,
    surface_areas,
    tessellate,
)


ALL_KINDS = tuple(k.value for k in ShapeKind)


def _examples() -> list[PrimitiveShape]:
    return [
        PrimitiveShape.create("sphere", (0.5,)),
        PrimitiveShape.create("box", (0.3, 0.6, 0.9)),
        PrimitiveShape.create("cylinder", (0.4, 0.8)),
        PrimitiveShape.create("ellipsoid", (0.3, 0.5, 1.0)),
        PrimitiveShape.create("capsule", (0.3, 0.6)),
    ]


def test_create_rescales_to_unit_bounding_radius() -> None:
    rng = np.random.default_rng(0)
    for shape in _examples():
        surface = sample_surface_points(shape, 4000, rng)
        assert np.linalg.norm(surface, axis=1).max() <= 1.0 + 1e-9
    assert PrimitiveShape.create("sphere", (0.5,)).params == (1.0,)


def test_invalid_parameters_raise() -> None:
    with pytest.raises(GeometryError):
        PrimitiveShape.create("box", (1.0, 1.0))
    with pytest.raises(GeometryError):
        PrimitiveShape.create("cylinder", (1.0, -1.0))
    with pytest.raises(GeometryError):
        PrimitiveShape(kind=ShapeKind.SPHERE, params=(2.0,))


def test_sphere_occupancy_boundary_counts_inside() -> None:
    shape = PrimitiveShape(kind=ShapeKind.SPHERE, params=(0.5,))
    inside = analytic_occupancy(shape, np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.6, 0.0, 0.0]]))
    assert inside.tolist() == [True, True, False]


def test_occupancy_agrees_with_signed_distance() -> None:
    rng = np.random.default_rng(1)
    queries = rng.uniform(-1.0, 1.0, size=(10_000, 3))
    for shape in _examples():
        occ = analytic_occupancy(shape, queries)
        sdf = signed_distance(shape, queries)
        away = np.abs(sdf) > 1e-9
        assert np.array_equal(occ[away], sdf[away] < 0)


def test_unit_sphere_samples_lie_on_surface() -> None:
    shape = PrimitiveShape.create("sphere", (1.0,))
    pts = sample_surface_points(shape, 5000, seed=2)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-6)


def test_surface_samples_are_on_the_boundary() -> None:
    for shape in _examples():
        pts = sample_surface_points(shape, 2000, seed=3)
        assert pts.shape == (2000, 3)
        if shape.kind is ShapeKind.ELLIPSOID:
            a, b, c = shape.params
            k = (pts[:, 0] / a) ** 2 + (pts[:, 1] / b) ** 2 + (pts[:, 2] / c) ** 2
            np.testing.assert_allclose(k, 1.0, atol=1e-9)
        else:
            np.testing.assert_allclose(signed_distance(shape, pts), 0.0, atol=1e-9)


def test_box_samples_follow_face_areas() -> None:
    shape = PrimitiveShape.create("box", (0.2, 0.5, 1.0))
    pts = sample_surface_points(shape, 100_000, seed=4)
    areas = surface_areas(shape)
    total = sum(areas.values())
    hx, hy, hz = shape.params
    on_x = np.isclose(np.abs(pts[:, 0]), hx)
    on_z = np.isclose(np.abs(pts[:, 2]), hz)
    assert on_x.mean() == pytest.approx((areas["+x"] + areas["-x"]) / total, abs=0.02)
    assert on_z.mean() == pytest.approx((areas["+z"] + areas["-z"]) / total, abs=0.02)


def test_sampling_is_deterministic_for_a_seed() -> None:
    shape = PrimitiveShape.create("capsule", (0.3, 0.5))
    assert np.array_equal(sample_surface_points(shape, 100, seed=5), sample_surface_points(shape, 100, seed=5))


def test_random_shapes_respect_kinds() -> None:
    rng = np.random.default_rng(6)
    kinds = {random_shape(rng, ("box", "capsule")).kind for _ in range(50)}
    assert kinds == {ShapeKind.BOX, ShapeKind.CAPSULE}


def test_difficulty_labels() -> None:
    assert PrimitiveShape.create("sphere", (1.0,)).difficulty == "easy"
    assert PrimitiveShape.create("box", (1.0, 1.0, 1.0)).difficulty == "medium"
    assert PrimitiveShape.create("box", (0.1, 1.0, 1.0)).difficulty == "hard"
    assert PrimitiveShape.create("capsule", (0.5, 0.5)).difficulty == "hard"


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_tessellation_is_closed_and_on_the_boundary(kind: str) -> None:
    shape = random_shape(np.random.default_rng(7), (kind,))
    verts, faces = tessellate(shape, lat_segments=8, lon_segments=12)
    mesh = SurfaceMesh(vertices=verts, faces=faces)
    assert mesh.is_watertight()
    assert mesh.euler_characteristic() == 2
    np.testing.assert_allclose(np.abs(signed_distance(shape, verts)).max(), 0.0, atol=1e-6)


def test_sphere_disparity_between_views() -> None:
    rig = CameraRig(fx=140.0, fy=140.0, cx=80.0, cy=60.0, baseline=0.13, width=160, height=120)
    shape = PrimitiveShape.create("sphere", (1.0,))
    verts, faces = tessellate(shape, lat_segments=16, lon_segments=32)
    z = 1.2
    center = np.array([0.0, 0.0, z])
    mesh = MeshInstance(vertices=verts * 0.1 + center, faces=faces, albedo=(0.8, 0.4, 0.2), center=center)
    frame = rasterize_stereo([mesh], rig)

    assert frame.left.shape == (120, 160, 3) and frame.left.dtype == np.uint8
    assert set(np.unique(frame.mask_left)) == {0, 1}
    _, ul = np.nonzero(frame.mask_left == 1)
    _, ur = np.nonzero(frame.mask_right == 1)
    assert ul.mean() - ur.mean() == pytest.approx(rig.fx * rig.baseline / z, abs=2.0)


def test_rendering_is_deterministic_and_background_is_gray() -> None:
    rig = CameraRig(fx=56.0, fy=56.0, cx=32.0, cy=24.0, baseline=0.13, width=64, height=48)
    frame_a = rasterize_stereo([], rig)
    assert np.all(frame_a.left == 128) and np.all(frame_a.mask_right == 0)

    shape = PrimitiveShape.create("box", (0.5, 0.7, 0.3))
    verts, faces = tessellate(shape, 8, 12)
    center = np.array([0.05, -0.02, 1.0])
    mesh = MeshInstance(vertices=verts * 0.2 + center, faces=faces, albedo=(0.5, 0.9, 0.3), center=center)
    one = rasterize_stereo([mesh], rig)
    two = rasterize_stereo([mesh], rig)
    assert np.array_equal(one.left, two.left) and np.array_equal(one.mask_right, two.mask_right)


def test_nearer_object_occludes() -> None:
    rig = CameraRig(fx=56.0, fy=56.0, cx=32.0, cy=24.0, baseline=0.13, width=64, height=48)
    verts, faces = tessellate(PrimitiveShape.create("sphere", (1.0,)), 8, 12)
    far_c, near_c = np.array([0.0, 0.0, 1.5]), np.array([0.0, 0.0, 0.8])
    far = MeshInstance(vertices=verts * 0.3 + far_c, faces=faces, albedo=(1.0, 0.0, 0.0), center=far_c)
    near = MeshInstance(vertices=verts * 0.1 + near_c, faces=faces, albedo=(0.0, 0.0, 1.0), center=near_c)
    frame = rasterize_stereo([far, near], rig)
    assert (frame.mask_left[20:29, 28:37] == 2).mean() > 0.9
