"""Procedural stereo scenes: generation, on-disk layout and torch datasets.

Layout of a dataset root::

    manifest.json
    scenes/<id>/left.png, right.png, mask_left.png, mask_right.png, annotation.json
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, ConfigDict, ValidationError
from torch.utils.data import Dataset, IterableDataset, get_worker_info

from .config import RunConfig
from .errors import DatasetError, SceneLoadError, SchemaVersionError
from .geometry import (
    CameraRig,
    Pose,
    SphereFrame,
    ball_points,
    clip_to_unit_ball,
    normalize_to_unit_cube,
    normalize_to_unit_sphere,
    uvd_to_camera,
)
from .metrics import sphere_iou
from .render import MeshInstance, StereoFrame, rasterize_stereo
from .shapes import PrimitiveShape, analytic_occupancy, random_shape, sample_surface_points, tessellate


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_PLACEMENT_TRIES = 100
MAX_SCENE_ATTEMPTS = 20
MAX_OVERLAP_IOU = 0.2
MIN_VISIBLE_PIXELS = 50
NEAR_CLEARANCE = 0.05

VoxelSpace = Literal["sphere", "cube"]


class PlacementError(RuntimeError):
    pass


# --- shape samples -----------------------------------------------------------


@dataclass(frozen=True)
class ShapeSample:
    """A posed primitive expressed in its normalized (unit ball or cube) frame."""

    frame: SphereFrame
    surface: np.ndarray
    queries: np.ndarray
    labels: np.ndarray


def occupancy_in_frame(
    shape: PrimitiveShape, rotation: Pose, frame: SphereFrame, queries: np.ndarray
) -> np.ndarray:
    """Occupancy of normalized-frame queries for a shape rotated by ``rotation``."""
    rotated = np.asarray(queries, dtype=np.float64) * frame.radius + np.asarray(frame.center)
    local = rotated @ rotation.matrix()
    return analytic_occupancy(shape, local)


def make_shape_sample(
    shape: PrimitiveShape,
    rotation: Pose,
    n_surface: int,
    n_queries: int,
    sigma: float,
    rng: np.random.Generator,
    voxel_space: VoxelSpace = "sphere",
) -> ShapeSample:
    rotated = sample_surface_points(shape, n_surface, rng) @ rotation.matrix().T
    if voxel_space == "sphere":
        frame, surface = normalize_to_unit_sphere(rotated)
    else:
        frame, surface = normalize_to_unit_cube(rotated)

    n_uniform = n_queries // 2
    if voxel_space == "sphere":
        uniform = ball_points(rng, n_uniform)
    else:
        uniform = rng.uniform(-1.0, 1.0, size=(n_uniform, 3))
    anchors = surface[rng.integers(0, surface.shape[0], size=n_queries - n_uniform)]
    near = anchors + rng.normal(0.0, sigma, size=anchors.shape)
    near = clip_to_unit_ball(near) if voxel_space == "sphere" else np.clip(near, -1.0, 1.0)
    queries = np.concatenate([uniform, near], axis=0)
    labels = occupancy_in_frame(shape, rotation, frame, queries)
    return ShapeSample(frame=frame, surface=surface, queries=queries, labels=labels)


# --- annotations ---------------------------------------------------------------


@dataclass
class ObjectAnnotation:
    kind: str
    params: tuple[float, ...]
    position: np.ndarray
    scale: float
    rotation_wxyz: tuple[float, float, float, float]
    shape_frame: SphereFrame
    surface_points: np.ndarray
    occ_queries: np.ndarray
    occ_labels: np.ndarray
    mask_id: int
    visible: bool
    difficulty: str
    latent_mu: np.ndarray | None = None
    latent_logvar: np.ndarray | None = None

    @property
    def shape(self) -> PrimitiveShape:
        return PrimitiveShape.create(self.kind, self.params)

    @property
    def pose(self) -> Pose:
        return Pose(rotation=self.rotation_wxyz)

    @property
    def frame(self) -> SphereFrame:
        return SphereFrame(center=tuple(float(x) for x in self.position), radius=float(self.scale))

    def world_surface(self) -> np.ndarray:
        return self.surface_points * self.scale + self.position


@dataclass
class SceneAnnotation:
    scene_id: str
    index: int
    seed: int
    attempt: int
    rig: CameraRig
    objects: list[ObjectAnnotation] = field(default_factory=list)

    def visible_objects(self) -> list[ObjectAnnotation]:
        return [o for o in self.objects if o.visible]


class _ObjectRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: str
    params: list[float]
    position: list[float]
    scale: float
    rotation_wxyz: list[float]
    shape_frame: dict[str, float | list[float]]
    surface_points: list[list[float]]
    occ_queries: list[list[float]]
    occ_labels: list[int]
    mask_id: int
    visible: bool
    difficulty: str
    latent_mu: list[float] | None = None
    latent_logvar: list[float] | None = None


class _AnnotationRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    scene_id: str
    index: int
    seed: int
    attempt: int
    rig: dict[str, float]
    objects: list[_ObjectRecord]


def _r9(values: np.ndarray | list[float] | tuple[float, ...]) -> list:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        return float(f"{float(arr):.9g}")
    return [_r9(v) for v in arr] if arr.ndim > 1 else [float(f"{x:.9g}") for x in arr.tolist()]


def annotation_to_json(ann: SceneAnnotation) -> dict:
    rig = ann.rig
    objects = []
    for o in ann.objects:
        rec = {
            "kind": o.kind,
            "params": _r9(o.params),
            "position": _r9(o.position),
            "scale": _r9(o.scale),
            "rotation_wxyz": _r9(o.rotation_wxyz),
            "shape_frame": {"center": _r9(o.shape_frame.center), "radius": _r9(o.shape_frame.radius)},
            "surface_points": _r9(o.surface_points),
            "occ_queries": _r9(o.occ_queries),
            "occ_labels": [int(b) for b in np.asarray(o.occ_labels, dtype=bool)],
            "mask_id": int(o.mask_id),
            "visible": bool(o.visible),
            "difficulty": o.difficulty,
        }
        if o.latent_mu is not None and o.latent_logvar is not None:
            rec["latent_mu"] = _r9(o.latent_mu)
            rec["latent_logvar"] = _r9(o.latent_logvar)
        objects.append(rec)
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": ann.scene_id,
        "index": ann.index,
        "seed": ann.seed,
        "attempt": ann.attempt,
        "rig": {
            "fx": rig.fx,
            "fy": rig.fy,
            "cx": rig.cx,
            "cy": rig.cy,
            "baseline": rig.baseline,
            "width": rig.width,
            "height": rig.height,
        },
        "objects": objects,
    }


def annotation_from_json(raw: dict, n_surface: int | None = None) -> SceneAnnotation:
    rec = _AnnotationRecord.model_validate(raw)
    if rec.schema_version != SCHEMA_VERSION:
        raise SchemaVersionError(f"annotation schema {rec.schema_version}, expected {SCHEMA_VERSION}")
    rig = CameraRig(
        fx=rec.rig["fx"],
        fy=rec.rig["fy"],
        cx=rec.rig["cx"],
        cy=rec.rig["cy"],
        baseline=rec.rig["baseline"],
        width=int(rec.rig["width"]),
        height=int(rec.rig["height"]),
    )
    objects = []
    for o in rec.objects:
        surface = np.asarray(o.surface_points, dtype=np.float64).reshape(-1, 3)
        if n_surface is not None and surface.shape[0] != n_surface:
            raise ValueError(f"expected {n_surface} surface points, got {surface.shape[0]}")
        queries = np.asarray(o.occ_queries, dtype=np.float64).reshape(-1, 3)
        labels = np.asarray(o.occ_labels, dtype=bool)
        if labels.shape[0] != queries.shape[0]:
            raise ValueError("occ_labels and occ_queries differ in length")
        frame = o.shape_frame
        objects.append(
            ObjectAnnotation(
                kind=o.kind,
                params=tuple(o.params),
                position=np.asarray(o.position, dtype=np.float64),
                scale=float(o.scale),
                rotation_wxyz=tuple(o.rotation_wxyz),
                shape_frame=SphereFrame(center=tuple(frame["center"]), radius=float(frame["radius"])),
                surface_points=surface,
                occ_queries=queries,
                occ_labels=labels,
                mask_id=o.mask_id,
                visible=o.visible,
                difficulty=o.difficulty,
                latent_mu=None if o.latent_mu is None else np.asarray(o.latent_mu, dtype=np.float64),
                latent_logvar=None if o.latent_logvar is None else np.asarray(o.latent_logvar, dtype=np.float64),
            )
        )
    return SceneAnnotation(
        scene_id=rec.scene_id,
        index=rec.index,
        seed=rec.seed,
        attempt=rec.attempt,
        rig=rig,
        objects=objects,
    )


# --- generation ----------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    shape: PrimitiveShape
    pose: Pose
    scale: float
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    """Renderable scene: world point = R (p * scale) + t for local point p."""

    objects: tuple[SceneObject, ...]
    rig: CameraRig
    seed: int


@dataclass(frozen=True)
class GeneratedScene:
    spec: SceneSpec
    annotation: SceneAnnotation
    images: StereoFrame


def scene_id_for(index: int) -> str:
    return f"{index:06d}"


def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def scene_meshes(spec: SceneSpec, lat_segments: int, lon_segments: int) -> list[MeshInstance]:
    meshes = []
    for obj in spec.objects:
        verts, faces = tessellate(obj.shape, lat_segments, lon_segments)
        world = verts * obj.scale @ obj.pose.matrix().T + np.asarray(obj.pose.translation)
        meshes.append(
            MeshInstance(
                vertices=world,
                faces=faces,
                albedo=obj.albedo,
                center=np.asarray(obj.pose.translation),
            )
        )
    return meshes


def generate_scene(cfg: RunConfig, index: int, master_seed: int) -> GeneratedScene:
    seed = scene_seed(master_seed, index)
    for attempt in range(MAX_SCENE_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([master_seed, index, attempt]))
        try:
            return _build_scene(cfg, index, seed, attempt, rng)
        except PlacementError as e:
            logger.warning("scene %s: %s; regenerating with sub-seed %d", scene_id_for(index), e, attempt + 1)
    raise DatasetError(f"scene {scene_id_for(index)}: placement failed {MAX_SCENE_ATTEMPTS} times")


def _place(
    cfg: RunConfig, rig: CameraRig, rng: np.random.Generator, placed: list[SphereFrame]
) -> tuple[np.ndarray, float]:
    s_lo, s_hi = cfg.data.scale_range
    d_lo, d_hi = cfg.data.depth_range
    for _ in range(MAX_PLACEMENT_TRIES):
        scale = float(rng.uniform(s_lo, s_hi))
        depth = float(rng.uniform(d_lo, d_hi))
        if depth - scale < NEAR_CLEARANCE:
            continue
        mu, mv = rig.fx * scale / depth, rig.fy * scale / depth
        if 2 * mu >= rig.width - 1 or 2 * mv >= rig.height - 1:
            continue
        u = rng.uniform(mu, rig.width - 1 - mu)
        v = rng.uniform(mv, rig.height - 1 - mv)
        center = uvd_to_camera(u, v, depth, rig)
        candidate = SphereFrame(center=tuple(float(c) for c in center), radius=scale)
        if all(sphere_iou(candidate, other) <= MAX_OVERLAP_IOU for other in placed):
            return center, scale
    raise PlacementError(f"no valid placement after {MAX_PLACEMENT_TRIES} tries")


def _build_scene(cfg: RunConfig, index: int, seed: int, attempt: int, rng: np.random.Generator) -> GeneratedScene:
    data = cfg.data
    rig = cfg.rig.to_rig()
    count = int(rng.integers(data.min_objects, data.max_objects + 1))

    scene_objects: list[SceneObject] = []
    annotations: list[ObjectAnnotation] = []
    placed: list[SphereFrame] = []
    for k in range(count):
        shape = random_shape(rng, data.kinds)
        rotation = Pose.random(rng)
        sample = make_shape_sample(
            shape,
            rotation,
            data.n_surface,
            data.n_queries,
            data.near_surface_sigma,
            rng,
            cfg.vae.voxel_space,
        )
        position, scale = _place(cfg, rig, rng, placed)
        placed.append(SphereFrame(center=tuple(float(c) for c in position), radius=scale))

        # world = (R p - c) * m + X  with  m = scale / r, so the normalized
        # surface maps to the world through SphereFrame(X, scale).
        m = scale / sample.frame.radius
        translation = position - np.asarray(sample.frame.center) * m
        pose = Pose(rotation=rotation.rotation, translation=tuple(float(t) for t in translation))
        albedo = tuple(float(a) for a in rng.uniform(0.2, 1.0, size=3))
        scene_objects.append(SceneObject(shape=shape, pose=pose, scale=m, albedo=albedo))
        annotations.append(
            ObjectAnnotation(
                kind=shape.kind.value,
                params=shape.params,
                position=np.asarray(position, dtype=np.float64),
                scale=scale,
                rotation_wxyz=rotation.rotation,
                shape_frame=sample.frame,
                surface_points=sample.surface,
                occ_queries=sample.queries,
                occ_labels=sample.labels,
                mask_id=k + 1,
                visible=True,
                difficulty=shape.difficulty,
            )
        )

    spec = SceneSpec(objects=tuple(scene_objects), rig=rig, seed=seed)
    images = rasterize_stereo(scene_meshes(spec, data.lat_segments, data.lon_segments), rig)
    for ann in annotations:
        in_front = ann.position[2] - ann.scale > 0.0
        ann.visible = bool(in_front and int((images.mask_left == ann.mask_id).sum()) >= MIN_VISIBLE_PIXELS)

    annotation = SceneAnnotation(
        scene_id=scene_id_for(index),
        index=index,
        seed=seed,
        attempt=attempt,
        rig=rig,
        objects=annotations,
    )
    return GeneratedScene(spec=spec, annotation=annotation, images=images)


# --- on-disk dataset -------------------------------------------------------------


def _dump_json(path: Path, payload: dict) -> None:
    tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")
    with tmp.open("w", encoding="utf-8") as f:
        json.dump(payload, f, separators=(",", ":"))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _save_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False, compress_level=6)


def write_scene(root: Path, scene: GeneratedScene) -> Path:
    """Write one scene directory atomically (temp dir, then rename)."""
    scenes = root / "scenes"
    scenes.mkdir(parents=True, exist_ok=True)
    final = scenes / scene.annotation.scene_id
    tmp = scenes / f".tmp-{scene.annotation.scene_id}-{uuid.uuid4().hex}"
    tmp.mkdir()
    try:
        _save_png(tmp / "left.png", scene.images.left)
        _save_png(tmp / "right.png", scene.images.right)
        _save_png(tmp / "mask_left.png", scene.images.mask_left)
        _save_png(tmp / "mask_right.png", scene.images.mask_right)
        _dump_json(tmp / "annotation.json", annotation_to_json(scene.annotation))
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return final


def write_manifest(root: Path, cfg: RunConfig, seed: int, extra: dict | None = None) -> dict:
    count = sum(1 for p in (root / "scenes").iterdir() if p.is_dir() and not p.name.startswith("."))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "num_scenes": count,
        "config": {
            "data": cfg.data.model_dump(mode="json"),
            "rig": cfg.rig.model_dump(mode="json"),
            "voxel_space": cfg.vae.voxel_space,
        },
    }
    if extra:
        manifest.update(extra)
    _dump_json(root / "manifest.json", manifest)
    return manifest


@dataclass(frozen=True)
class SceneResult:
    scene_id: str
    annotation: SceneAnnotation | None
    error: str | None

    @property
    def ok(self) -> bool:
        return self.error is None


class SceneDataset:
    """Lazy, schema-validated view over a dataset root."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.errors: list[SceneLoadError] = []
        manifest_path = self.root / "manifest.json"
        try:
            self.manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise DatasetError(f"no manifest.json under {self.root}") from e
        except json.JSONDecodeError as e:
            raise DatasetError(f"corrupt manifest.json under {self.root}: {e}") from e
        version = self.manifest.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"dataset schema {version}, expected {SCHEMA_VERSION}")

    @classmethod
    def load(cls, root: Path) -> "SceneDataset":
        return cls(root)

    @property
    def n_surface(self) -> int:
        return int(self.manifest["config"]["data"]["n_surface"])

    def scene_ids(self) -> list[str]:
        scenes = self.root / "scenes"
        if not scenes.is_dir():
            return []
        return sorted(p.name for p in scenes.iterdir() if p.is_dir() and not p.name.startswith("."))

    def scene_dir(self, scene_id: str) -> Path:
        return self.root / "scenes" / scene_id

    def load_annotation(self, scene_id: str) -> SceneAnnotation:
        path = self.scene_dir(scene_id) / "annotation.json"
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            return annotation_from_json(raw, n_surface=self.n_surface)
        except FileNotFoundError as e:
            raise SceneLoadError(scene_id, f"missing file {path.name}") from e
        except SchemaVersionError as e:
            raise SceneLoadError(scene_id, str(e)) from e
        except (json.JSONDecodeError, ValidationError, ValueError, KeyError) as e:
            raise SceneLoadError(scene_id, f"invalid annotation: {e}") from e

    def load_images(self, scene_id: str) -> StereoFrame:
        d = self.scene_dir(scene_id)
        try:
            return StereoFrame(
                left=np.asarray(Image.open(d / "left.png").convert("RGB")),
                right=np.asarray(Image.open(d / "right.png").convert("RGB")),
                mask_left=np.asarray(Image.open(d / "mask_left.png")),
                mask_right=np.asarray(Image.open(d / "mask_right.png")),
            )
        except FileNotFoundError as e:
            raise SceneLoadError(scene_id, f"missing file {Path(e.filename).name}") from e
        except (UnidentifiedImageError, OSError) as e:
            raise SceneLoadError(scene_id, f"unreadable image: {e}") from e

    def iter_results(self) -> Iterator[SceneResult]:
        for scene_id in self.scene_ids():
            try:
                yield SceneResult(scene_id=scene_id, annotation=self.load_annotation(scene_id), error=None)
            except SceneLoadError as e:
                yield SceneResult(scene_id=scene_id, annotation=None, error=e.reason)

    def iter_scenes(self) -> Iterator[SceneAnnotation]:
        """Yield loadable scenes; failures are logged and kept in ``errors``."""
        for res in self.iter_results():
            if res.annotation is not None:
                yield res.annotation
            else:
                err = SceneLoadError(res.scene_id, res.error or "unknown error")
                self.errors.append(err)
                logger.warning("skipping %s", err)

    def update_annotation(self, annotation: SceneAnnotation) -> None:
        _dump_json(self.scene_dir(annotation.scene_id) / "annotation.json", annotation_to_json(annotation))

    def update_manifest(self, **fields: object) -> None:
        self.manifest.update(fields)
        _dump_json(self.root / "manifest.json", self.manifest)


# --- torch datasets ----------------------------------------------------------------


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 -> float CxHxW centered on zero."""
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0 - 0.5


@dataclass
class SceneTargets:
    scene_id: str
    position: torch.Tensor
    scale: torch.Tensor
    mu: torch.Tensor | None
    logvar: torch.Tensor | None
    occ_queries: torch.Tensor
    occ_labels: torch.Tensor

    @property
    def count(self) -> int:
        return int(self.position.shape[0])

    def to(self, device: torch.device | str) -> "SceneTargets":
        def move(t: torch.Tensor | None) -> torch.Tensor | None:
            return None if t is None else t.to(device)

        return replace(
            self,
            position=self.position.to(device),
            scale=self.scale.to(device),
            mu=move(self.mu),
            logvar=move(self.logvar),
            occ_queries=self.occ_queries.to(device),
            occ_labels=self.occ_labels.to(device),
        )


def balanced_queries(queries: np.ndarray, labels: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Take ``n`` queries split evenly between the uniform and near-surface blocks.

    Stored queries hold the uniform block first, in the first ``len // 2`` rows.
    """
    total = queries.shape[0]
    if total <= n:
        return queries, labels
    split = total // 2
    half = min(n // 2, split)
    idx = np.concatenate([np.arange(half), split + np.arange(n - half)])
    return queries[idx], labels[idx]


def targets_from_annotation(ann: SceneAnnotation, n_queries: int, require_latents: bool) -> SceneTargets:
    objs = ann.visible_objects()
    if require_latents and any(o.latent_mu is None for o in objs):
        raise SceneLoadError(ann.scene_id, "missing GT latents; run encode-gt first")
    has_latents = bool(objs) and all(o.latent_mu is not None for o in objs)

    def stack(rows: list[np.ndarray], shape: tuple[int, ...]) -> torch.Tensor:
        if not rows:
            return torch.zeros((0, *shape), dtype=torch.float32)
        return torch.from_numpy(np.stack(rows).astype(np.float32))

    width = len(objs[0].latent_mu) if has_latents else 0
    picked = [balanced_queries(o.occ_queries, o.occ_labels, n_queries) for o in objs]
    return SceneTargets(
        scene_id=ann.scene_id,
        position=stack([o.position for o in objs], (3,)),
        scale=torch.tensor([o.scale for o in objs], dtype=torch.float32),
        mu=stack([o.latent_mu for o in objs], (width,)) if has_latents else None,
        logvar=stack([o.latent_logvar for o in objs], (width,)) if has_latents else None,
        occ_queries=stack([q for q, _ in picked], (n_queries, 3)),
        occ_labels=stack([lab.astype(np.float32) for _, lab in picked], (n_queries,)),
    )


class DetectionDataset(Dataset):
    def __init__(self, root: Path, n_queries: int = 512, require_latents: bool = True, limit: int | None = None):
        self.scenes = SceneDataset.load(root)
        ids = self.scenes.scene_ids()
        self.scene_ids = ids[:limit] if limit else ids
        self.n_queries = n_queries
        self.require_latents = require_latents

    def __len__(self) -> int:
        return len(self.scene_ids)

    def __getitem__(self, i: int) -> dict:
        scene_id = self.scene_ids[i]
        ann = self.scenes.load_annotation(scene_id)
        images = self.scenes.load_images(scene_id)
        return {
            "left": image_to_tensor(images.left),
            "right": image_to_tensor(images.right),
            "targets": targets_from_annotation(ann, self.n_queries, self.require_latents),
        }


def collate_scenes(batch: list[dict]) -> dict:
    return {
        "left": torch.stack([b["left"] for b in batch]),
        "right": torch.stack([b["right"] for b in batch]),
        "targets": [b["targets"] for b in batch],
    }


def collect_shapes(dataset: SceneDataset, limit: int | None = None) -> list[PrimitiveShape]:
    shapes: list[PrimitiveShape] = []
    seen: set[tuple] = set()
    for ann in dataset.iter_scenes():
        for o in ann.objects:
            key = (o.kind, o.params)
            if key in seen:
                continue
            seen.add(key)
            shapes.append(o.shape)
            if limit is not None and len(shapes) >= limit:
                return shapes
    return shapes


class RotatedShapeStream(IterableDataset):
    """Endless (shape, random rotation) training pairs for the shape VAE."""

    def __init__(
        self,
        shapes: list[PrimitiveShape],
        n_surface: int,
        n_queries: int,
        sigma: float,
        seed: int,
        voxel_space: VoxelSpace = "sphere",
    ):
        if not shapes:
            raise DatasetError("no shapes to train on")
        self.shapes = shapes
        self.n_surface = n_surface
        self.n_queries = n_queries
        self.sigma = sigma
        self.seed = seed
        self.voxel_space = voxel_space

    def __iter__(self) -> Iterator[dict[str, torch.Tensor]]:
        info = get_worker_info()
        worker = 0 if info is None else info.id
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, worker]))
        while True:
            shape = self.shapes[int(rng.integers(len(self.shapes)))]
            sample = make_shape_sample(
                shape,
                Pose.random(rng),
                self.n_surface,
                self.n_queries,
                self.sigma,
                rng,
                self.voxel_space,
            )
            yield {
                "surface": torch.from_numpy(sample.surface.astype(np.float32)),
                "queries": torch.from_numpy(sample.queries.astype(np.float32)),
                "labels": torch.from_numpy(sample.labels.astype(np.float32)),
            }
