"""Stereo image features lifted into tri-plane (UV, UD, VD) features over UVD space."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig
from .errors import ShapeMismatchError
from .geometry import CameraRig, UVDGrid, camera_to_stereo_pixels, uvd_to_camera
from .layers import MultiHeadAttention, SelfAttentionBlock


BACKBONE_STRIDE = 8
PLANES = ("uv", "ud", "vd")


@dataclass(frozen=True)
class ImageFeatureMap:
    values: torch.Tensor  # (B, C, H', W')
    stride: int

    @property
    def size(self) -> tuple[int, int]:
        return int(self.values.shape[-2]), int(self.values.shape[-1])


@dataclass(frozen=True)
class TPVFeatures:
    """Plane tensors ``uv: (B, U, V, C)``, ``ud: (B, U, D, C)``, ``vd: (B, V, D, C)``."""

    uv: torch.Tensor
    ud: torch.Tensor
    vd: torch.Tensor

    @property
    def dims(self) -> tuple[int, int, int]:
        return int(self.uv.shape[-3]), int(self.uv.shape[-2]), int(self.ud.shape[-2])

    def tokens(self) -> torch.Tensor:
        """All plane cells as one ``(B, U*V + U*D + V*D, C)`` sequence."""
        b, c = self.uv.shape[0], self.uv.shape[-1]
        return torch.cat([self.uv.reshape(b, -1, c), self.ud.reshape(b, -1, c), self.vd.reshape(b, -1, c)], dim=1)

    @classmethod
    def from_tokens(cls, tokens: torch.Tensor, U: int, V: int, D: int) -> "TPVFeatures":
        b, _, c = tokens.shape
        uv, ud, vd = torch.split(tokens, [U * V, U * D, V * D], dim=1)
        return cls(uv=uv.reshape(b, U, V, c), ud=ud.reshape(b, U, D, c), vd=vd.reshape(b, V, D, c))

    def plane(self, name: str) -> torch.Tensor:
        return getattr(self, name)


def compose_voxel_feature(tpv: TPVFeatures, u: int, v: int, d: int) -> torch.Tensor:
    """Feature of voxel ``(u, v, d)``: the sum of its three plane features."""
    U, V, D = tpv.dims
    for name, idx, size in (("u", u, U), ("v", v, V), ("d", d, D)):
        if not 0 <= idx < size:
            raise IndexError(f"{name} index {idx} out of range [0, {size})")
    return tpv.uv[..., u, v, :] + tpv.ud[..., u, d, :] + tpv.vd[..., v, d, :]


# --- image backbone --------------------------------------------------------------


def _conv_stage(c_in: int, c_out: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=stride, padding=1),
        nn.GroupNorm(math.gcd(8, c_out), c_out),
        nn.GELU(),
    )


class StereoBackbone(nn.Module):
    """Four conv stages (strides 2, 2, 2, 1); one set of weights for both views."""

    stride = BACKBONE_STRIDE

    def __init__(self, width: int):
        super().__init__()
        self.stages = nn.Sequential(
            _conv_stage(3, 32, 2),
            _conv_stage(32, 64, 2),
            _conv_stage(64, width, 2),
            _conv_stage(width, width, 1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.stages(images)


def extract_stereo_features(
    backbone: StereoBackbone, left: torch.Tensor, right: torch.Tensor
) -> tuple[ImageFeatureMap, ImageFeatureMap]:
    if left.shape != right.shape:
        raise ShapeMismatchError(f"left {tuple(left.shape)} and right {tuple(right.shape)} images differ")
    feats = backbone(torch.cat([left, right], dim=0))
    f_left, f_right = feats.split(left.shape[0], dim=0)
    return ImageFeatureMap(f_left, backbone.stride), ImageFeatureMap(f_right, backbone.stride)


# --- projection table --------------------------------------------------------------


@dataclass(frozen=True)
class ProjectionTable:
    """Per-voxel projections, arrays shaped ``(U, V, D, ...)``, in image pixels."""

    left: np.ndarray
    right: np.ndarray
    valid: np.ndarray

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())

    @staticmethod
    def to_feature(pixels: np.ndarray, stride: int) -> np.ndarray:
        return (pixels + 0.5) / stride - 0.5


def build_projection_table(grid: UVDGrid, rig: CameraRig) -> ProjectionTable:
    u_pix, v_pix = grid.pixel_centers(rig)
    uu, vv, dd = np.meshgrid(u_pix, v_pix, grid.depth_centers, indexing="ij")
    points = uvd_to_camera(uu, vv, dd, rig)
    _, right = camera_to_stereo_pixels(points, rig)
    left = np.stack([uu, vv], axis=-1)
    valid = (right[..., 0] >= -0.5) & (right[..., 0] < rig.width - 0.5)
    return ProjectionTable(left=left, right=right, valid=valid)


def _reference_indices(size: int, count: int) -> np.ndarray:
    count = min(count, size)
    return np.unique(np.round(np.linspace(0, size - 1, count)).astype(np.int64))


def _plane_refs(table: np.ndarray, plane: str, refs: dict[str, np.ndarray]) -> np.ndarray:
    """Rearrange a ``(U, V, D, ...)`` table to ``(cells, R, ...)`` for one plane."""
    if plane == "uv":
        sel = table[:, :, refs["uv"]]
    elif plane == "ud":
        sel = np.moveaxis(table[:, refs["ud"]], 1, 2)
    else:
        sel = np.moveaxis(table[refs["vd"]], 0, 2)
    return sel.reshape(sel.shape[0] * sel.shape[1], sel.shape[2], *sel.shape[3:])


def _normalize(coords: np.ndarray, size: int) -> np.ndarray:
    if size <= 1:
        return np.zeros_like(coords)
    return 2.0 * coords / (size - 1) - 1.0


class PlaneCrossAttention(nn.Module):
    """Each plane cell attends to image features sampled at its reference voxels."""

    def __init__(self, width: int, heads: int, n_refs: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(width)
        self.norm_kv = nn.LayerNorm(width)
        self.view_embed = nn.Parameter(torch.randn(2, width) * 0.02)
        self.ref_embed = nn.Parameter(torch.randn(n_refs, width) * 0.02)
        self.attn = MultiHeadAttention(width, heads, zero_init_out=True)

    def forward(
        self,
        plane: torch.Tensor,
        left_samples: torch.Tensor,
        right_samples: torch.Tensor,
        right_valid: torch.Tensor,
    ) -> torch.Tensor:
        b, cells, c = plane.shape
        refs = left_samples.shape[2]
        keys = torch.cat(
            [
                left_samples + self.view_embed[0] + self.ref_embed,
                right_samples + self.view_embed[1] + self.ref_embed,
            ],
            dim=2,
        )
        valid = torch.cat([torch.ones_like(right_valid), right_valid], dim=-1)
        valid = valid.unsqueeze(0).expand(b, -1, -1).reshape(b * cells, 1, 2 * refs)
        out = self.attn(
            self.norm_q(plane).reshape(b * cells, 1, c),
            self.norm_kv(keys).reshape(b * cells, 2 * refs, c),
            valid,
        )
        return plane + out.reshape(b, cells, c)


class StereoCrossAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_refs: dict[str, int]):
        super().__init__()
        self.planes = nn.ModuleDict({p: PlaneCrossAttention(cfg.width, cfg.heads, n_refs[p]) for p in PLANES})

    def forward(
        self,
        tpv: TPVFeatures,
        f_left: ImageFeatureMap,
        f_right: ImageFeatureMap,
        sampler: "ReferenceSampler",
    ) -> TPVFeatures:
        b = tpv.uv.shape[0]
        c = tpv.uv.shape[-1]
        updated = {}
        for name in PLANES:
            plane = tpv.plane(name)
            shape = plane.shape
            left, right, valid = sampler.sample(name, f_left, f_right)
            out = self.planes[name](plane.reshape(b, -1, c), left, right, valid)
            updated[name] = out.reshape(shape)
        return TPVFeatures(**updated)


class ReferenceSampler(nn.Module):
    """Fixed per-plane reference locations from the projection table, in grid_sample coordinates."""

    def __init__(self, table: ProjectionTable, feature_size: tuple[int, int], n_refs: int, use_right_view: bool = True):
        super().__init__()
        U, V, D = table.valid.shape
        h, w = feature_size
        refs = {
            "uv": _reference_indices(D, n_refs),
            "ud": _reference_indices(V, n_refs),
            "vd": _reference_indices(U, n_refs),
        }
        self.n_refs = {p: int(len(r)) for p, r in refs.items()}
        valid = table.valid if use_right_view else np.zeros_like(table.valid)
        for name in PLANES:
            for view, pixels in (("left", table.left), ("right", table.right)):
                feat = ProjectionTable.to_feature(pixels, BACKBONE_STRIDE)
                norm = np.stack([_normalize(feat[..., 0], w), _normalize(feat[..., 1], h)], axis=-1)
                cells = _plane_refs(norm, name, refs)
                self.register_buffer(f"{name}_{view}", torch.as_tensor(cells, dtype=torch.float32), persistent=False)
            mask = _plane_refs(valid, name, refs)
            self.register_buffer(f"{name}_valid", torch.as_tensor(mask, dtype=torch.bool), persistent=False)

    @staticmethod
    def _grid_sample(features: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        b, c = features.shape[:2]
        cells, refs, _ = coords.shape
        grid = coords.to(features.dtype).reshape(1, 1, cells * refs, 2).expand(b, -1, -1, -1)
        out = F.grid_sample(features, grid, mode="bilinear", padding_mode="border", align_corners=True)
        return out.reshape(b, c, cells, refs).permute(0, 2, 3, 1)

    def sample(
        self, plane: str, f_left: ImageFeatureMap, f_right: ImageFeatureMap
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        left = self._grid_sample(f_left.values, getattr(self, f"{plane}_left"))
        right = self._grid_sample(f_right.values, getattr(self, f"{plane}_right"))
        return left, right, getattr(self, f"{plane}_valid")


class TPVSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, dims: tuple[int, int, int]):
        super().__init__()
        self.dims = dims
        self.block = SelfAttentionBlock(width, heads)

    def forward(self, tpv: TPVFeatures) -> TPVFeatures:
        return TPVFeatures.from_tokens(self.block(tpv.tokens()), *self.dims)


class TPVEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, rig: CameraRig, grid: UVDGrid):
        super().__init__()
        if (grid.U, grid.V, grid.D) != (cfg.U, cfg.V, cfg.D):
            raise ShapeMismatchError("UVD grid does not match the encoder configuration")
        self.cfg = cfg
        self.rig = rig
        self.grid = grid
        c = cfg.width
        self.backbone = StereoBackbone(c)
        feature_size = (math.ceil(rig.height / BACKBONE_STRIDE), math.ceil(rig.width / BACKBONE_STRIDE))
        self.table = build_projection_table(grid, rig)
        self.sampler = ReferenceSampler(self.table, feature_size, cfg.ref_points_per_cell, cfg.use_right_view)

        self.plane_uv = nn.Parameter(torch.randn(cfg.U, cfg.V, c) * 0.02)
        self.plane_ud = nn.Parameter(torch.randn(cfg.U, cfg.D, c) * 0.02)
        self.plane_vd = nn.Parameter(torch.randn(cfg.V, cfg.D, c) * 0.02)
        dims = (cfg.U, cfg.V, cfg.D)
        self.cross_layers = nn.ModuleList(StereoCrossAttention(cfg, self.sampler.n_refs) for _ in range(cfg.n_layers))
        self.self_layers = nn.ModuleList(TPVSelfAttention(c, cfg.heads, dims) for _ in range(cfg.n_layers))

    @property
    def n_tokens(self) -> int:
        U, V, D = self.cfg.U, self.cfg.V, self.cfg.D
        return U * V + U * D + V * D

    def initial_planes(self, batch: int) -> TPVFeatures:
        return TPVFeatures(
            uv=self.plane_uv.unsqueeze(0).expand(batch, -1, -1, -1),
            ud=self.plane_ud.unsqueeze(0).expand(batch, -1, -1, -1),
            vd=self.plane_vd.unsqueeze(0).expand(batch, -1, -1, -1),
        )

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> TPVFeatures:
        """Encode a batch of rectified stereo pairs ``(B, 3, H, W)``."""
        if left.shape[-2:] != (self.rig.height, self.rig.width):
            raise ShapeMismatchError(
                f"images are {tuple(left.shape[-2:])}, rig expects {(self.rig.height, self.rig.width)}"
            )
        tpv = self.initial_planes(left.shape[0])
        if not self.cross_layers:
            return tpv
        f_left, f_right = extract_stereo_features(self.backbone, left, right)
        for cross, fuse in zip(self.cross_layers, self.self_layers):
            tpv = fuse(cross(tpv, f_left, f_right, self.sampler))
        return tpv
