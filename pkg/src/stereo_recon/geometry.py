"""Stereo pinhole camera, UVD voxel space, spherical normalization and rigid poses.

Conventions: right-handed camera frame looking down +z, pixel centers at integer
coordinates, rectified rig with the right camera translated by ``(baseline, 0, 0)``,
quaternions stored scalar-first as ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .errors import BehindCameraError, DegenerateShapeError, DomainError, GeometryError


@dataclass(frozen=True)
class CameraRig:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.baseline <= 0:
            raise GeometryError("baseline must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be at least 1x1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def disparity(self, depth: Any) -> Any:
        return self.fx * self.baseline / depth


@dataclass(frozen=True)
class UVDGrid:
    U: int
    V: int
    D: int
    d_min: float
    d_max: float

    def __post_init__(self) -> None:
        if min(self.U, self.V, self.D) < 1:
            raise GeometryError("grid sizes must be at least 1")
        if not 0 < self.d_min < self.d_max:
            raise GeometryError("depth range must satisfy 0 < d_min < d_max")

    @property
    def depth_centers(self) -> np.ndarray:
        # Uniform in inverse depth; index 0 is the nearest bin.
        inv_near, inv_far = 1.0 / self.d_min, 1.0 / self.d_max
        step = (inv_near - inv_far) / self.D
        inv = inv_near - (np.arange(self.D, dtype=np.float64) + 0.5) * step
        return 1.0 / inv

    def pixel_centers(self, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
        """Image-plane pixel coordinates of the U and V cell centers."""
        u = (np.arange(self.U, dtype=np.float64) + 0.5) * rig.width / self.U - 0.5
        v = (np.arange(self.V, dtype=np.float64) + 0.5) * rig.height / self.V - 0.5
        return u, v


@dataclass(frozen=True)
class Pose:
    rotation: tuple[float, float, float, float]
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if abs(float(np.linalg.norm(self.rotation)) - 1.0) > 1e-6:
            raise GeometryError("rotation quaternion must have unit norm")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(rotation=(1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_rotation(cls, rot: Rotation, translation: Any = (0.0, 0.0, 0.0)) -> "Pose":
        q = rot.as_quat(scalar_first=True)
        q = q / np.linalg.norm(q)
        return cls(
            rotation=tuple(float(x) for x in q),
            translation=tuple(float(x) for x in np.asarray(translation, dtype=np.float64)),
        )

    @classmethod
    def random(cls, rng: np.random.Generator, translation: Any = (0.0, 0.0, 0.0)) -> "Pose":
        # A normalized 4D Gaussian is uniform over SO(3).
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        return cls.from_rotation(Rotation.from_quat(q, scalar_first=True), translation)

    def as_rotation(self) -> Rotation:
        return Rotation.from_quat(np.asarray(self.rotation, dtype=np.float64), scalar_first=True)

    def matrix(self) -> np.ndarray:
        return self.as_rotation().as_matrix()

    def compose(self, inner: "Pose") -> "Pose":
        """Pose equivalent to applying ``inner`` first, then ``self``."""
        rot = self.as_rotation() * inner.as_rotation()
        t = self.matrix() @ np.asarray(inner.translation) + np.asarray(self.translation)
        return Pose.from_rotation(rot, t)


@dataclass(frozen=True)
class SphereFrame:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise GeometryError("sphere radius must be positive")

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius**3


def _check_positive_depth(d: Any) -> None:
    bad = (d <= 0).any() if isinstance(d, torch.Tensor) else np.any(np.asarray(d) <= 0)
    if bad:
        raise DomainError("depth must be positive")


def _stack(parts: list[Any]) -> Any:
    if any(isinstance(p, torch.Tensor) for p in parts):
        ref = next(p for p in parts if isinstance(p, torch.Tensor))
        parts = [
            p if isinstance(p, torch.Tensor) else torch.as_tensor(p, dtype=ref.dtype, device=ref.device).expand_as(ref)
            for p in parts
        ]
        return torch.stack(parts, dim=-1)
    return np.stack(np.broadcast_arrays(*[np.asarray(p, dtype=np.float64) for p in parts]), axis=-1)


def uvd_to_camera(u: Any, v: Any, d: Any, rig: CameraRig) -> Any:
    """Back-project pixel ``(u, v)`` at depth ``d`` into the left-camera frame.

    Accepts scalars, numpy arrays or torch tensors (differentiable).
    """
    _check_positive_depth(d)
    x = d * (u - rig.cx) / rig.fx
    y = d * (v - rig.cy) / rig.fy
    return _stack([x, y, d])


def camera_to_stereo_pixels(points: Any, rig: CameraRig) -> tuple[Any, Any]:
    """Project camera-frame points into both views of the rectified rig.

    Returns ``(left, right)`` arrays of shape ``(..., 2)``.
    """
    is_tensor = isinstance(points, torch.Tensor)
    pts = points if is_tensor else np.asarray(points, dtype=np.float64)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    if (z <= 0).any():
        raise BehindCameraError("point lies on or behind the camera plane")
    v = rig.fy * y / z + rig.cy
    u_left = rig.fx * x / z + rig.cx
    u_right = rig.fx * (x - rig.baseline) / z + rig.cx
    return _stack([u_left, v]), _stack([u_right, v])


def normalize_to_unit_sphere(points: np.ndarray) -> tuple[SphereFrame, np.ndarray]:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
        raise DegenerateShapeError("need at least two 3D points")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    radius = float(np.linalg.norm(pts - center, axis=1).max())
    if radius <= 0.0:
        raise DegenerateShapeError("all points coincide")
    frame = SphereFrame(center=tuple(float(c) for c in center), radius=radius)
    return frame, (pts - center) / radius


def normalize_to_unit_cube(points: np.ndarray) -> tuple[SphereFrame, np.ndarray]:
    """Cubic voxel-space normalization: AABB midpoint, largest half-extent maps to 1.

    The returned frame's ``radius`` is the half-extent, so ``denormalize_points``
    inverts it as well.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
        raise DegenerateShapeError("need at least two 3D points")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    half = float((hi - lo).max() / 2.0)
    if half <= 0.0:
        raise DegenerateShapeError("all points coincide")
    frame = SphereFrame(center=tuple(float(c) for c in center), radius=half)
    return frame, (pts - center) / half


def denormalize_points(normalized: Any, frame: SphereFrame) -> Any:
    if isinstance(normalized, torch.Tensor):
        center = torch.as_tensor(frame.center, dtype=normalized.dtype, device=normalized.device)
        return normalized * frame.radius + center
    return np.asarray(normalized, dtype=np.float64) * frame.radius + np.asarray(frame.center)


def apply_pose(points: np.ndarray, pose: Pose) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ pose.matrix().T + np.asarray(pose.translation)


def sample_unit_ball_queries(count: int, seed: int) -> np.ndarray:
    if count < 1:
        raise DomainError("count must be at least 1")
    rng = np.random.default_rng(seed)
    return ball_points(rng, count)


def sample_unit_cube_queries(count: int, seed: int) -> np.ndarray:
    if count < 1:
        raise DomainError("count must be at least 1")
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(count, 3))


def ball_points(rng: np.random.Generator, count: int) -> np.ndarray:
    dirs = rng.standard_normal((count, 3))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    radii = rng.random(count) ** (1.0 / 3.0)
    pts = dirs * radii[:, None]
    return clip_to_unit_ball(pts)


def clip_to_unit_ball(points: np.ndarray) -> np.ndarray:
    pts = np.array(points, dtype=np.float64, copy=True)
    norms = np.linalg.norm(pts, axis=1)
    over = norms > 1.0
    pts[over] /= norms[over, None]
    # Division can land a hair above 1.
    norms = np.linalg.norm(pts, axis=1)
    over = norms > 1.0
    pts[over] *= np.nextafter(1.0, 0.0)
    return pts
