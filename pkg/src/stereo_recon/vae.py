"""Pose-aware shape VAE.

Shapes are encoded already rotated into the observation frame and normalized
into the unit ball, so a single latent carries both pose and geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import VAEConfig
from .errors import DomainError, InputDomainError, ShapeMismatchError
from .layers import CrossAttentionBlock, PointEmbed, SelfAttentionBlock
from .mesh import SurfaceMesh, mesh_from_field


LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
PROB_EPS = 1e-7
DOMAIN_TOL = 1e-6


@dataclass(frozen=True)
class LatentDistribution:
    """Diagonal Gaussian over latents; tensors are ``(..., C_kl)``."""

    mu: torch.Tensor
    logvar: torch.Tensor

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(self.logvar)

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar)

    def detach(self) -> "LatentDistribution":
        return LatentDistribution(mu=self.mu.detach(), logvar=self.logvar.detach())

    def __getitem__(self, index: object) -> "LatentDistribution":
        return LatentDistribution(mu=self.mu[index], logvar=self.logvar[index])


@dataclass(frozen=True)
class VAEOutput:
    dist: LatentDistribution
    z: torch.Tensor
    probs: torch.Tensor


def check_unit_domain(points: torch.Tensor, voxel_space: str = "sphere") -> None:
    if voxel_space == "cube":
        extent = points.abs().amax(dim=-1) if points.numel() else points.new_zeros(0)
    else:
        extent = torch.linalg.vector_norm(points, dim=-1)
    if extent.numel() and float(extent.max()) > 1.0 + DOMAIN_TOL:
        raise InputDomainError(f"points leave the unit {voxel_space} (max extent {float(extent.max()):.6f})")


class ShapeVAE(nn.Module):
    def __init__(self, cfg: VAEConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width

        self.point_embed = PointEmbed(cfg.n_freqs, w)
        self.encoder_blocks = nn.ModuleList(SelfAttentionBlock(w, cfg.heads) for _ in range(cfg.encoder_blocks))
        self.object_token = nn.Parameter(torch.randn(1, 1, w) * 0.02)
        self.object_attn = CrossAttentionBlock(w, cfg.heads)
        self.latent_norm = nn.LayerNorm(w)
        self.mu_head = nn.Linear(w, cfg.latent_width)
        self.logvar_head = nn.Linear(w, cfg.latent_width)

        self.latent_proj = nn.Linear(cfg.latent_width, w)
        self.point_tokens = nn.Parameter(torch.randn(cfg.n_point_tokens, w))
        self.token_attn = CrossAttentionBlock(w, cfg.heads)
        self.decoder_blocks = nn.ModuleList(SelfAttentionBlock(w, cfg.heads) for _ in range(cfg.decoder_blocks))
        self.query_embed = PointEmbed(cfg.n_freqs, w)
        self.query_attn = CrossAttentionBlock(w, cfg.heads)
        self.out_norm = nn.LayerNorm(w)
        self.occ_head = nn.Linear(w, 1)

    @property
    def latent_width(self) -> int:
        return self.cfg.latent_width

    def encode(self, surface: torch.Tensor) -> LatentDistribution:
        """Surface points ``(B, N, 3)`` or ``(N, 3)`` to a latent distribution."""
        unbatched = surface.dim() == 2
        pts = surface.unsqueeze(0) if unbatched else surface
        if pts.dim() != 3 or pts.shape[-1] != 3:
            raise ShapeMismatchError(f"surface points must be (B, N, 3), got {tuple(surface.shape)}")
        if pts.shape[1] != self.cfg.n_surface:
            raise ShapeMismatchError(f"expected {self.cfg.n_surface} surface points, got {pts.shape[1]}")
        check_unit_domain(pts, self.cfg.voxel_space)

        x = self.point_embed(pts)
        for block in self.encoder_blocks:
            x = block(x)
        token = self.object_token.to(x.dtype).expand(x.shape[0], -1, -1)
        obj = self.latent_norm(self.object_attn(token, x)).squeeze(1)
        logvar = self.logvar_head(obj).clamp(LOGVAR_MIN, LOGVAR_MAX)
        dist = LatentDistribution(mu=self.mu_head(obj), logvar=logvar)
        return dist[0] if unbatched else dist

    def decode_tokens(self, z: torch.Tensor) -> torch.Tensor:
        """Point-token bank conditioned on latents ``(B, C_kl)``: ``(B, T, C)``."""
        context = self.latent_proj(z).unsqueeze(1)
        tokens = self.point_tokens.to(context.dtype).unsqueeze(0).expand(z.shape[0], -1, -1)
        tokens = self.token_attn(tokens, context)
        for block in self.decoder_blocks:
            tokens = block(tokens)
        return tokens

    def occupancy_logits(self, tokens: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        check_unit_domain(queries, self.cfg.voxel_space)
        q = self.query_attn(self.query_embed(queries), tokens)
        return self.occ_head(self.out_norm(q)).squeeze(-1)

    def decode(self, z: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """Occupancy probabilities for queries ``(B, Q, 3)`` given latents ``(B, C_kl)``."""
        unbatched = z.dim() == 1
        if unbatched:
            z, queries = z.unsqueeze(0), queries.unsqueeze(0)
        if queries.shape[-1] != 3 or queries.shape[0] != z.shape[0]:
            raise ShapeMismatchError("queries must be (B, Q, 3) with B matching the latents")
        probs = torch.sigmoid(self.occupancy_logits(self.decode_tokens(z), queries))
        return probs[0] if unbatched else probs

    def forward(
        self,
        surface: torch.Tensor,
        queries: torch.Tensor,
        noise: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> VAEOutput:
        dist = self.encode(surface)
        z = reparameterize(dist, noise=noise, generator=generator)
        return VAEOutput(dist=dist, z=z, probs=self.decode(z, queries))


def reparameterize(
    dist: LatentDistribution,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    if noise is None:
        noise = torch.randn(dist.mu.shape, generator=generator, dtype=dist.mu.dtype, device=dist.mu.device)
    return dist.mu + dist.std * noise


def recon_loss(pred: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped away from 0 and 1."""
    if pred.shape != labels.shape:
        raise ShapeMismatchError(f"prediction {tuple(pred.shape)} vs labels {tuple(labels.shape)}")
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def klreg_loss(dist: LatentDistribution) -> torch.Tensor:
    """Per-channel mean of 0.5 * (mu^2 + var - logvar), averaged over the batch.

    Without the usual -1 this is 0.5 at the standard normal, never lower.
    """
    per_channel = 0.5 * (dist.mu.pow(2) + dist.var - dist.logvar)
    return per_channel.mean(dim=-1).mean()


def interpolate_latents(a: torch.Tensor, b: torch.Tensor, t: float) -> torch.Tensor:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"interpolation weight must lie in [0, 1], got {t}")
    return (1.0 - t) * a + t * b


def grid_queries(resolution: int, voxel_space: str = "sphere") -> tuple[np.ndarray, np.ndarray]:
    """Cell-corner samples over [-1, 1]^3 and the mask of those inside the voxel space."""
    axis = np.linspace(-1.0, 1.0, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    if voxel_space == "cube":
        inside = np.ones(grid.shape[0], dtype=bool)
    else:
        inside = np.linalg.norm(grid, axis=1) <= 1.0
    return grid, inside


@torch.no_grad()
def occupancy_grid(vae: ShapeVAE, z: torch.Tensor, resolution: int, chunk: int = 32768) -> np.ndarray:
    """Occupancy on a ``resolution^3`` grid for each latent in ``z`` ``(B, C_kl)``.

    Cells outside the voxel space are left at zero.
    """
    if resolution < 8:
        raise DomainError("marching-cubes resolution must be at least 8")
    grid, inside = grid_queries(resolution, vae.cfg.voxel_space)
    pts = torch.as_tensor(grid[inside], dtype=z.dtype, device=z.device)
    tokens = vae.decode_tokens(z)
    values = []
    for start in range(0, pts.shape[0], chunk):
        q = pts[start : start + chunk].unsqueeze(0).expand(z.shape[0], -1, -1)
        values.append(torch.sigmoid(vae.occupancy_logits(tokens, q)))
    occ = torch.cat(values, dim=1).double().cpu().numpy()

    field = np.zeros((z.shape[0], grid.shape[0]), dtype=np.float64)
    field[:, inside] = occ
    return field.reshape(z.shape[0], resolution, resolution, resolution)


def extract_surface(vae: ShapeVAE, z: torch.Tensor, resolution: int = 48, iso: float = 0.5) -> SurfaceMesh:
    """Mesh of the ``iso`` level set of one latent, in the normalized frame."""
    return extract_surfaces(vae, z.reshape(1, -1), resolution, iso)[0]


def extract_surfaces(vae: ShapeVAE, z: torch.Tensor, resolution: int = 48, iso: float = 0.5) -> list[SurfaceMesh]:
    if z.shape[0] == 0:
        return []
    fields = occupancy_grid(vae, z, resolution)
    spacing = 2.0 / (resolution - 1)
    return [mesh_from_field(field, iso, lower=-1.0, spacing=spacing) for field in fields]
