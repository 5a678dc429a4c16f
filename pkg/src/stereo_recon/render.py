"""Deterministic z-buffer rasterizer for the rectified stereo rig."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraRig


BACKGROUND = 0.5
AMBIENT = 0.3
NEAR_PLANE = 1e-3
# Unit vector from the surface towards the light, camera frame.
LIGHT_DIR = np.array([-0.35, -0.6, -0.72]) / np.linalg.norm([-0.35, -0.6, -0.72])


@dataclass(frozen=True)
class MeshInstance:
    """A triangle mesh already placed in the left-camera frame."""

    vertices: np.ndarray
    faces: np.ndarray
    albedo: tuple[float, float, float]
    center: np.ndarray

    def in_front(self) -> bool:
        return bool((self.vertices[:, 2] > NEAR_PLANE).any())


@dataclass(frozen=True)
class StereoFrame:
    left: np.ndarray
    right: np.ndarray
    mask_left: np.ndarray
    mask_right: np.ndarray


def rasterize_stereo(meshes: list[MeshInstance], rig: CameraRig) -> StereoFrame:
    """Render both views; mask value is the mesh index plus one, 0 is background."""
    left, mask_left = render_view(meshes, rig, camera_x=0.0)
    right, mask_right = render_view(meshes, rig, camera_x=rig.baseline)
    return StereoFrame(left=left, right=right, mask_left=mask_left, mask_right=mask_right)


def render_view(meshes: list[MeshInstance], rig: CameraRig, camera_x: float) -> tuple[np.ndarray, np.ndarray]:
    h, w = rig.height, rig.width
    color = np.full((h, w, 3), BACKGROUND, dtype=np.float64)
    depth = np.full((h, w), np.inf, dtype=np.float64)
    mask = np.zeros((h, w), dtype=np.uint8)
    offset = np.array([camera_x, 0.0, 0.0])

    for index, mesh in enumerate(meshes):
        if not mesh.in_front():
            continue
        verts = mesh.vertices - offset
        albedo = np.asarray(mesh.albedo, dtype=np.float64)
        for face in mesh.faces:
            tri = verts[face]
            if (tri[:, 2] <= NEAR_PLANE).any():
                continue
            normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            norm = np.linalg.norm(normal)
            if norm == 0.0:
                continue
            normal /= norm
            if np.dot(normal, tri.mean(axis=0) - (mesh.center - offset)) < 0.0:
                normal = -normal
            shade = AMBIENT + (1.0 - AMBIENT) * max(0.0, float(np.dot(normal, LIGHT_DIR)))
            _fill_triangle(tri, rig, color, depth, mask, albedo * shade, index + 1)

    image = np.clip(np.rint(color * 255.0), 0, 255).astype(np.uint8)
    return image, mask


def _fill_triangle(
    tri: np.ndarray,
    rig: CameraRig,
    color: np.ndarray,
    depth: np.ndarray,
    mask: np.ndarray,
    rgb: np.ndarray,
    mask_value: int,
) -> None:
    z = tri[:, 2]
    u = rig.fx * tri[:, 0] / z + rig.cx
    v = rig.fy * tri[:, 1] / z + rig.cy

    u0, u1 = int(np.ceil(u.min())), int(np.floor(u.max()))
    v0, v1 = int(np.ceil(v.min())), int(np.floor(v.max()))
    u0, v0 = max(u0, 0), max(v0, 0)
    u1, v1 = min(u1, rig.width - 1), min(v1, rig.height - 1)
    if u0 > u1 or v0 > v1:
        return

    area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
    if area == 0.0:
        return

    pu, pv = np.meshgrid(np.arange(u0, u1 + 1, dtype=np.float64), np.arange(v0, v1 + 1, dtype=np.float64))
    w0 = ((u[1] - pu) * (v[2] - pv) - (u[2] - pu) * (v[1] - pv)) / area
    w1 = ((u[2] - pu) * (v[0] - pv) - (u[0] - pu) * (v[2] - pv)) / area
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
    if not inside.any():
        return

    # Perspective-correct depth: 1/z is affine in screen space.
    inv_z = w0 / z[0] + w1 / z[1] + w2 / z[2]
    pix_z = 1.0 / np.where(inside, inv_z, 1.0)
    region = depth[v0 : v1 + 1, u0 : u1 + 1]
    closer = inside & (pix_z < region)
    if not closer.any():
        return
    region[closer] = pix_z[closer]
    color[v0 : v1 + 1, u0 : u1 + 1][closer] = rgb
    mask[v0 : v1 + 1, u0 : u1 + 1][closer] = mask_value
