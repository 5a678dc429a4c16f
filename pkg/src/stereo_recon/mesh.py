from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import trimesh
from skimage import measure

from .geometry import SphereFrame, denormalize_points


@dataclass(frozen=True)
class SurfaceMesh:
    vertices: np.ndarray
    faces: np.ndarray

    @classmethod
    def empty(cls) -> "SurfaceMesh":
        return cls(vertices=np.zeros((0, 3), dtype=np.float64), faces=np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return self.faces.shape[0] == 0

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)

    def denormalized(self, frame: SphereFrame) -> "SurfaceMesh":
        return SurfaceMesh(vertices=denormalize_points(self.vertices, frame), faces=self.faces)

    def euler_characteristic(self) -> int:
        mesh = trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=True)
        return int(mesh.euler_number)

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        return bool(trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=True).is_watertight)

    def export(self, path: Path) -> Path:
        """Write the mesh as binary STL or OBJ, chosen by suffix."""
        suffix = path.suffix.lower().lstrip(".")
        if suffix not in ("stl", "obj"):
            raise ValueError(f"unsupported mesh format: {path.suffix}")
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_trimesh().export(path, file_type=suffix)
        return path

    def sample_points(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the triangles."""
        if self.is_empty:
            return np.zeros((0, 3), dtype=np.float64)
        mesh = self.to_trimesh()
        if not mesh.area > 0.0:
            return self.vertices[self.faces[rng.integers(0, len(self.faces), size=count), 0]]
        points, _faces = trimesh.sample.sample_surface(mesh, count, seed=int(rng.integers(2**31)))
        return np.asarray(points, dtype=np.float64)


def mesh_from_field(field: np.ndarray, iso: float, lower: float, spacing: float) -> SurfaceMesh:
    """Marching cubes over a cubic scalar grid whose first sample sits at ``lower``.

    The field is padded with zeros so every isosurface closes; a field that never
    reaches ``iso`` gives an empty mesh.
    """
    values = np.pad(np.asarray(field, dtype=np.float64), 1, mode="constant", constant_values=0.0)
    if not values.max() > iso:
        return SurfaceMesh.empty()
    verts, faces, _normals, _ = measure.marching_cubes(values, level=iso, spacing=(spacing, spacing, spacing))
    verts = verts + (lower - spacing)
    return SurfaceMesh(vertices=verts.astype(np.float64), faces=faces.astype(np.int64))
