"""Attention building blocks shared by the shape VAE, the TPV encoder and the detector."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class PointEmbed(nn.Module):
    """Sinusoidal embedding of xyz coordinates followed by a linear projection.

    Each coordinate contributes itself plus ``sin``/``cos`` at ``n_freqs`` octaves
    of pi, i.e. ``3 + 6 * n_freqs`` raw features.
    """

    def __init__(self, n_freqs: int, width: int):
        super().__init__()
        self.register_buffer("freqs", (2.0 ** torch.arange(n_freqs)) * math.pi, persistent=False)
        self.proj = nn.Linear(3 + 6 * n_freqs, width)

    @property
    def raw_width(self) -> int:
        return 3 + 6 * int(self.freqs.numel())

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        angles = (points[..., None] * self.freqs.to(points.dtype)).flatten(-2)
        return torch.cat([points, torch.sin(angles), torch.cos(angles)], dim=-1)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return self.proj(self.encode(points))


class MultiHeadAttention(nn.Module):
    """Multi-head attention over ``F.scaled_dot_product_attention``.

    ``valid`` is a boolean mask broadcastable to ``(B, Lq, Lk)``; False keys get
    zero weight. A row with no valid key attends to every key.
    """

    def __init__(self, width: int, heads: int, kv_width: int | None = None, zero_init_out: bool = False):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} is not divisible by {heads} heads")
        kv_width = kv_width or width
        self.heads = heads
        self.head_dim = width // heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(kv_width, width)
        self.v = nn.Linear(kv_width, width)
        self.out = nn.Linear(width, width)
        if zero_init_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, kv: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        q, k, v = self._split(self.q(query)), self._split(self.k(kv)), self._split(self.v(kv))
        mask = None
        if valid is not None:
            mask = valid if valid.dim() == 4 else valid.unsqueeze(1)
            # fully masked rows would softmax to NaN
            mask = mask | ~mask.any(dim=-1, keepdim=True)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        out = out.transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        return self.out(out)


class FeedForward(nn.Module):
    def __init__(self, width: int, mult: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.net = nn.Sequential(nn.Linear(width, width * mult), nn.GELU(), nn.Linear(width * mult, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(self.norm(x))


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual self-attention followed by a residual feed-forward."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads)
        self.ff = FeedForward(width)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm(x)
        x = x + self.attn(h, h, valid)
        return x + self.ff(x)


class CrossAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, kv_width: int | None = None, feed_forward: bool = True):
        super().__init__()
        self.norm_q = nn.LayerNorm(width)
        self.norm_kv = nn.LayerNorm(kv_width or width)
        self.attn = MultiHeadAttention(width, heads, kv_width)
        self.ff = FeedForward(width) if feed_forward else None

    def forward(self, x: torch.Tensor, context: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_kv(context), valid)
        if self.ff is not None:
            x = x + self.ff(x)
        return x
