"""Set-prediction object decoder over TPV features, and full-object reconstruction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import DecoderConfig, RunConfig
from .geometry import CameraRig, SphereFrame, uvd_to_camera
from .layers import FeedForward, MultiHeadAttention
from .mesh import SurfaceMesh
from .tpv import TPVEncoder, TPVFeatures
from .vae import LOGVAR_MAX, LOGVAR_MIN, LatentDistribution, ShapeVAE, extract_surfaces


logger = logging.getLogger(__name__)

MIN_SCALE = 1e-6


@dataclass(frozen=True)
class ObjectPredictions:
    """Raw decoder output for a batch: ``position (B, M, 3)``, ``scale (B, M)``,
    ``shape`` latents ``(B, M, C_kl)``, ``confidence (B, M)``."""

    position: torch.Tensor
    scale: torch.Tensor
    shape: LatentDistribution
    confidence: torch.Tensor

    @property
    def batch_size(self) -> int:
        return int(self.position.shape[0])

    @property
    def n_queries(self) -> int:
        return int(self.position.shape[1])

    def scene(self, b: int) -> list["ObjectPrediction"]:
        pos = self.position[b].detach().double().cpu().numpy()
        scale = self.scale[b].detach().double().cpu().numpy()
        mu = self.shape.mu[b].detach().double().cpu().numpy()
        logvar = self.shape.logvar[b].detach().double().cpu().numpy()
        conf = self.confidence[b].detach().double().cpu().numpy()
        return [
            ObjectPrediction(
                index=i,
                position=pos[i],
                scale=float(scale[i]),
                mu=mu[i],
                logvar=logvar[i],
                confidence=float(conf[i]),
            )
            for i in range(pos.shape[0])
        ]


@dataclass(frozen=True)
class ObjectPrediction:
    index: int
    position: np.ndarray
    scale: float
    mu: np.ndarray
    logvar: np.ndarray
    confidence: float

    @property
    def frame(self) -> SphereFrame:
        return SphereFrame(center=tuple(float(x) for x in self.position), radius=self.scale)


class DecoderLayer(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = MultiHeadAttention(width, heads)
        self.norm_q = nn.LayerNorm(width)
        self.norm_kv = nn.LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, heads)
        self.ff = FeedForward(width)

    def forward(self, queries: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        h = self.norm_self(queries)
        queries = queries + self.self_attn(h, h)
        queries = queries + self.cross_attn(self.norm_q(queries), self.norm_kv(memory))
        return queries + self.ff(queries)


def _mlp(width: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(width, width), nn.GELU(), nn.Linear(width, out))


class ObjectDecoder(nn.Module):
    """Learned object queries refined against the flattened tri-plane tokens."""

    def __init__(self, cfg: DecoderConfig, latent_width: int, rig: CameraRig, depth_range: tuple[float, float]):
        super().__init__()
        self.cfg = cfg
        self.rig = rig
        self.inv_near = 1.0 / depth_range[0]
        self.inv_far = 1.0 / depth_range[1]
        w = cfg.width
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, w) * 0.02)
        self.layers = nn.ModuleList(DecoderLayer(w, cfg.heads) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(w)
        self.position_head = _mlp(w, 3)
        self.scale_head = _mlp(w, 1)
        self.mu_head = nn.Linear(w, latent_width)
        self.logvar_head = nn.Linear(w, latent_width)
        self.confidence_head = nn.Linear(w, 1)

    def decode_position(self, raw: torch.Tensor) -> torch.Tensor:
        """Map unbounded head output to camera-frame points inside the frustum.

        Sigmoids give normalized (u, v, d); u and v span the image, d spans the
        configured depth range uniformly in inverse depth.
        """
        s = torch.sigmoid(raw)
        u = s[..., 0] * self.rig.width - 0.5
        v = s[..., 1] * self.rig.height - 0.5
        inv_depth = self.inv_near + s[..., 2] * (self.inv_far - self.inv_near)
        return uvd_to_camera(u, v, 1.0 / inv_depth, self.rig)

    def forward(self, tpv: TPVFeatures) -> ObjectPredictions:
        memory = tpv.tokens()
        x = self.queries.to(memory.dtype).unsqueeze(0).expand(memory.shape[0], -1, -1)
        for layer in self.layers:
            x = layer(x, memory)
        x = self.norm(x)
        return ObjectPredictions(
            position=self.decode_position(self.position_head(x)),
            scale=F.softplus(self.scale_head(x).squeeze(-1)) + MIN_SCALE,
            shape=LatentDistribution(
                mu=self.mu_head(x),
                logvar=self.logvar_head(x).clamp(LOGVAR_MIN, LOGVAR_MAX),
            ),
            confidence=torch.sigmoid(self.confidence_head(x).squeeze(-1)),
        )


class Detector(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        rig = cfg.rig.to_rig()
        self.encoder = TPVEncoder(cfg.encoder, rig, cfg.uvd_grid())
        self.decoder = ObjectDecoder(cfg.decoder, cfg.vae.latent_width, rig, cfg.data.depth_range)

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> ObjectPredictions:
        return self.decoder(self.encoder(left, right))


def decode_objects(decoder: ObjectDecoder, tpv: TPVFeatures) -> ObjectPredictions:
    return decoder(tpv)


def postprocess_predictions(preds: list[ObjectPrediction], threshold: float) -> list[ObjectPrediction]:
    """Confident predictions, highest first; equal confidences keep query order."""
    kept = [p for p in preds if p.confidence >= threshold]
    return sorted(kept, key=lambda p: (-p.confidence, p.index))


@dataclass(frozen=True)
class Reconstruction:
    prediction: ObjectPrediction
    mesh: SurfaceMesh

    @property
    def empty(self) -> bool:
        return self.mesh.is_empty


def reconstruct_object_shape(pred: ObjectPrediction, vae: ShapeVAE, resolution: int = 48) -> Reconstruction:
    return reconstruct_objects([pred], vae, resolution)[0]


@torch.no_grad()
def reconstruct_objects(preds: list[ObjectPrediction], vae: ShapeVAE, resolution: int = 48) -> list[Reconstruction]:
    """Decode each prediction's latent mode and place the mesh in the camera frame."""
    if not preds:
        return []
    param = next(vae.parameters())
    z = torch.as_tensor(np.stack([p.mu for p in preds]), dtype=param.dtype, device=param.device)
    meshes = extract_surfaces(vae, z, resolution)
    out = []
    for pred, mesh in zip(preds, meshes):
        if mesh.is_empty:
            logger.debug("query %d decoded to an empty surface", pred.index)
            out.append(Reconstruction(prediction=pred, mesh=mesh))
        else:
            out.append(Reconstruction(prediction=pred, mesh=mesh.denormalized(pred.frame)))
    return out


def export_reconstructions(out_dir: Path, scene_id: str, recons: list[Reconstruction], stl: bool = False) -> Path:
    scene_dir = out_dir / scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    sidecar = []
    for rank, rec in enumerate(recons):
        pred = rec.prediction
        stem = f"{rank}_{pred.confidence:.3f}"
        files = []
        if not rec.empty:
            files.append(rec.mesh.export(scene_dir / f"{stem}.obj").name)
            if stl:
                files.append(rec.mesh.export(scene_dir / f"{stem}.stl").name)
        sidecar.append(
            {
                "rank": rank,
                "query": pred.index,
                "position": [float(x) for x in pred.position],
                "scale": pred.scale,
                "confidence": pred.confidence,
                "empty": rec.empty,
                "files": files,
            }
        )
    path = scene_dir / "predictions.json"
    path.write_text(json.dumps({"scene_id": scene_id, "objects": sidecar}, indent=2), encoding="utf-8")
    return path
