"""Procedural primitives with exact occupancy, surface sampling and tessellation.

Every primitive lives in its own local frame, centered at the origin with its
symmetry axis along z, and is scaled at construction so that its farthest point
lies exactly on the unit sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import GeometryError


class ShapeKind(str, Enum):
    SPHERE = "sphere"
    BOX = "box"
    CYLINDER = "cylinder"
    ELLIPSOID = "ellipsoid"
    CAPSULE = "capsule"


_PARAM_COUNT = {
    ShapeKind.SPHERE: 1,  # radius
    ShapeKind.BOX: 3,  # half extents
    ShapeKind.CYLINDER: 2,  # radius, half height
    ShapeKind.ELLIPSOID: 3,  # semi axes
    ShapeKind.CAPSULE: 2,  # radius, half length of the core segment
}

HARD_ASPECT_RATIO = 2.5


@dataclass(frozen=True)
class PrimitiveShape:
    kind: ShapeKind
    params: tuple[float, ...]

    def __post_init__(self) -> None:
        kind = ShapeKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if len(self.params) != _PARAM_COUNT[kind]:
            raise GeometryError(f"{kind.value} takes {_PARAM_COUNT[kind]} parameters, got {len(self.params)}")
        if any(not p > 0 for p in self.params):
            raise GeometryError("all shape dimensions must be positive")
        if bounding_radius(kind, self.params) > 1.0 + 1e-9:
            raise GeometryError("shape must fit inside the unit ball; build it with PrimitiveShape.create")

    @classmethod
    def create(cls, kind: ShapeKind | str, params: tuple[float, ...] | list[float]) -> "PrimitiveShape":
        """Build a primitive rescaled so its bounding radius is exactly 1."""
        kind = ShapeKind(kind)
        raw = tuple(float(p) for p in params)
        if len(raw) != _PARAM_COUNT[kind] or any(not p > 0 for p in raw):
            raise GeometryError(f"invalid parameters for {kind.value}: {raw}")
        bound = bounding_radius(kind, raw)
        return cls(kind=kind, params=tuple(p / bound for p in raw))

    @property
    def difficulty(self) -> str:
        """Proxy Easy/Medium/Hard label from primitive kind and elongation."""
        if self.kind is ShapeKind.CAPSULE or aspect_ratio(self) > HARD_ASPECT_RATIO:
            return "hard"
        if self.kind in (ShapeKind.SPHERE, ShapeKind.ELLIPSOID):
            return "easy"
        return "medium"


def bounding_radius(kind: ShapeKind, params: tuple[float, ...]) -> float:
    if kind is ShapeKind.SPHERE:
        return params[0]
    if kind is ShapeKind.BOX:
        return math.sqrt(sum(p * p for p in params))
    if kind is ShapeKind.CYLINDER:
        r, h = params
        return math.sqrt(r * r + h * h)
    if kind is ShapeKind.ELLIPSOID:
        return max(params)
    r, h = params
    return r + h


def aspect_ratio(shape: PrimitiveShape) -> float:
    if shape.kind is ShapeKind.CYLINDER:
        r, h = shape.params
        extents = (r, r, h)
    elif shape.kind is ShapeKind.CAPSULE:
        r, h = shape.params
        extents = (r, r, r + h)
    elif shape.kind is ShapeKind.SPHERE:
        return 1.0
    else:
        extents = shape.params
    return max(extents) / min(extents)


def random_shape(rng: np.random.Generator, kinds: tuple[str, ...]) -> PrimitiveShape:
    kind = ShapeKind(kinds[int(rng.integers(len(kinds)))])
    if kind is ShapeKind.SPHERE:
        raw = (1.0,)
    elif kind in (ShapeKind.BOX, ShapeKind.ELLIPSOID):
        raw = tuple(rng.uniform(0.3, 1.0, size=3))
    elif kind is ShapeKind.CYLINDER:
        raw = (rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0))
    else:
        raw = (rng.uniform(0.2, 0.6), rng.uniform(0.3, 1.0))
    return PrimitiveShape.create(kind, raw)


def analytic_occupancy(shape: PrimitiveShape, queries: np.ndarray) -> np.ndarray:
    """Exact inside test in the shape's local frame; boundary counts as inside."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    p = shape.params
    if shape.kind is ShapeKind.SPHERE:
        return x * x + y * y + z * z <= p[0] * p[0]
    if shape.kind is ShapeKind.BOX:
        return (np.abs(x) <= p[0]) & (np.abs(y) <= p[1]) & (np.abs(z) <= p[2])
    if shape.kind is ShapeKind.CYLINDER:
        r, h = p
        return (x * x + y * y <= r * r) & (np.abs(z) <= h)
    if shape.kind is ShapeKind.ELLIPSOID:
        a, b, c = p
        return (x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2 <= 1.0
    r, h = p
    dz = z - np.clip(z, -h, h)
    return x * x + y * y + dz * dz <= r * r


def signed_distance(shape: PrimitiveShape, queries: np.ndarray) -> np.ndarray:
    """Signed distance (negative inside). Exact except for the ellipsoid, whose
    value is the scaled implicit function; its sign is exact."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    p = shape.params
    if shape.kind is ShapeKind.SPHERE:
        return np.linalg.norm(q, axis=1) - p[0]
    if shape.kind is ShapeKind.BOX:
        d = np.abs(q) - np.asarray(p)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return outside + inside
    if shape.kind is ShapeKind.CYLINDER:
        r, h = p
        d = np.stack([np.hypot(x, y) - r, np.abs(z) - h], axis=1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(d.max(axis=1), 0.0)
        return outside + inside
    if shape.kind is ShapeKind.ELLIPSOID:
        a, b, c = p
        k = np.sqrt((x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2)
        return (k - 1.0) * min(a, b, c)
    r, h = p
    dz = z - np.clip(z, -h, h)
    return np.sqrt(x * x + y * y + dz * dz) - r


def surface_areas(shape: PrimitiveShape) -> dict[str, float]:
    """Area of each analytic surface patch used for weighted sampling."""
    p = shape.params
    if shape.kind is ShapeKind.BOX:
        hx, hy, hz = p
        return {
            "+x": 4 * hy * hz,
            "-x": 4 * hy * hz,
            "+y": 4 * hx * hz,
            "-y": 4 * hx * hz,
            "+z": 4 * hx * hy,
            "-z": 4 * hx * hy,
        }
    if shape.kind is ShapeKind.CYLINDER:
        r, h = p
        return {"side": 2 * math.pi * r * 2 * h, "+z": math.pi * r * r, "-z": math.pi * r * r}
    if shape.kind is ShapeKind.CAPSULE:
        r, h = p
        return {"side": 2 * math.pi * r * 2 * h, "caps": 4 * math.pi * r * r}
    return {"surface": 1.0}


def sample_surface_points(shape: PrimitiveShape, count: int, seed: int | np.random.Generator) -> np.ndarray:
    if count < 1:
        raise GeometryError("count must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = shape.params
    if shape.kind is ShapeKind.SPHERE:
        return _unit_directions(rng, count) * p[0]
    if shape.kind is ShapeKind.ELLIPSOID:
        return _sample_ellipsoid(rng, count, p)

    areas = surface_areas(shape)
    names = list(areas)
    weights = np.array([areas[n] for n in names])
    picks = rng.choice(len(names), size=count, p=weights / weights.sum())
    out = np.empty((count, 3), dtype=np.float64)
    for i, name in enumerate(names):
        idx = np.flatnonzero(picks == i)
        if idx.size:
            out[idx] = _sample_patch(shape, name, rng, idx.size)
    return out


def _unit_directions(rng: np.random.Generator, count: int) -> np.ndarray:
    d = rng.standard_normal((count, 3))
    return d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)


def _sample_patch(shape: PrimitiveShape, name: str, rng: np.random.Generator, n: int) -> np.ndarray:
    p = shape.params
    if shape.kind is ShapeKind.BOX:
        axis = "xyz".index(name[1])
        sign = 1.0 if name[0] == "+" else -1.0
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.asarray(p)
        pts[:, axis] = sign * p[axis]
        return pts
    r, h = p
    if name == "side":
        theta = rng.uniform(0.0, 2 * math.pi, size=n)
        z = rng.uniform(-h, h, size=n)
        return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    if name == "caps":
        d = _unit_directions(rng, n)
        pts = d * r
        pts[:, 2] += np.where(d[:, 2] >= 0.0, h, -h)
        return pts
    # flat cylinder caps
    theta = rng.uniform(0.0, 2 * math.pi, size=n)
    rad = r * np.sqrt(rng.random(n))
    z = np.full(n, h if name == "+z" else -h)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _sample_ellipsoid(rng: np.random.Generator, count: int, axes: tuple[float, ...]) -> np.ndarray:
    # Map sphere directions onto the ellipsoid and accept in proportion to the
    # local area stretch, which makes the result area-uniform.
    a, b, c = axes
    g_max = max(a * b, a * c, b * c)
    chunks: list[np.ndarray] = []
    got = 0
    while got < count:
        d = _unit_directions(rng, max(2 * (count - got), 64))
        g = np.sqrt((b * c * d[:, 0]) ** 2 + (a * c * d[:, 1]) ** 2 + (a * b * d[:, 2]) ** 2)
        keep = rng.random(d.shape[0]) * g_max <= g
        pts = d[keep] * np.asarray(axes)
        chunks.append(pts)
        got += pts.shape[0]
    return np.concatenate(chunks, axis=0)[:count]


def radial_extent(shape: PrimitiveShape, directions: np.ndarray, iterations: int = 48) -> np.ndarray:
    """Distance from the origin to the boundary along each unit direction.

    Every primitive is convex and contains the origin, so bisection on the
    occupancy along the ray is exact up to the iteration count.
    """
    dirs = np.asarray(directions, dtype=np.float64)
    lo = np.zeros(dirs.shape[0])
    hi = np.full(dirs.shape[0], 1.0 + 1e-9)
    for _ in range(iterations):
        mid = (lo + hi) / 2.0
        inside = analytic_occupancy(shape, dirs * mid[:, None])
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return lo


def tessellate(shape: PrimitiveShape, lat_segments: int = 16, lon_segments: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-topology triangle mesh: a UV sphere pushed out to the boundary.

    Returns ``(vertices (V, 3), faces (F, 3) int)`` in the local frame with
    counter-clockwise winding seen from outside.
    """
    theta = np.linspace(0.0, math.pi, lat_segments + 1)[1:-1]
    phi = np.linspace(0.0, 2 * math.pi, lon_segments, endpoint=False)
    t, f = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(t) * np.cos(f), np.sin(t) * np.sin(f), np.cos(t)], axis=-1).reshape(-1, 3)
    dirs = np.concatenate([[[0.0, 0.0, 1.0]], ring, [[0.0, 0.0, -1.0]]], axis=0)
    verts = dirs * radial_extent(shape, dirs)[:, None]

    faces: list[tuple[int, int, int]] = []
    top, bottom = 0, dirs.shape[0] - 1
    n_rings = lat_segments - 1

    def idx(ring_i: int, j: int) -> int:
        return 1 + ring_i * lon_segments + (j % lon_segments)

    for j in range(lon_segments):
        faces.append((top, idx(0, j), idx(0, j + 1)))
    for i in range(n_rings - 1):
        for j in range(lon_segments):
            a, b = idx(i, j), idx(i, j + 1)
            c, d = idx(i + 1, j), idx(i + 1, j + 1)
            faces.append((a, c, b))
            faces.append((b, c, d))
    for j in range(lon_segments):
        faces.append((bottom, idx(n_rings - 1, j + 1), idx(n_rings - 1, j)))
    return verts, np.asarray(faces, dtype=np.int64)
