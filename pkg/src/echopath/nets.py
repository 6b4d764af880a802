"""Reusable network blocks for the denoisers, codec, and embedder.

Everything is sized for desk-scale CPU runs: channel counts are small and
attention operates on a single conditioning token or short temporal axes.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def norm_for(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock2d(nn.Module):
    """Two-conv residual block with an additive timestep projection."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int | None = None):
        super().__init__()
        self.norm1 = norm_for(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.norm2 = norm_for(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb_proj is not None and emb is not None:
            h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TokenCrossAttention(nn.Module):
    """Cross-attention from spatial positions onto conditioning token(s).

    With a single key/value token the softmax is degenerate and the block acts
    as a learned additive projection of the condition; kept as real attention
    so multi-token conditioning works unchanged.
    """

    def __init__(self, channels: int, cond_dim: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.norm = norm_for(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(cond_dim, channels)
        self.to_v = nn.Linear(cond_dim, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, cond_tokens: torch.Tensor) -> torch.Tensor:
        # x: (B, C, H, W); cond_tokens: (B, n_tokens, cond_dim)
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k = self.to_k(cond_tokens)
        v = self.to_v(cond_tokens)
        d = c // self.heads

        def split(t):
            return t.reshape(b, -1, self.heads, d).transpose(1, 2)

        attn = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (attn @ split(v)).transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class TemporalConv(nn.Module):
    """Residual 1-D convolution along the frame axis of (B, C, F, H, W)."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = norm_for(channels)
        self.conv = nn.Conv3d(channels, channels, (3, 1, 1), padding=(1, 0, 0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv(F.silu(self.norm(x)))


class TemporalAttention(nn.Module):
    """Self-attention over the frame axis, applied per spatial position."""

    def __init__(self, channels: int, max_frames: int = 64):
        super().__init__()
        self.norm = norm_for(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.pos = nn.Parameter(torch.zeros(max_frames, channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, f, h, w = x.shape
        tokens = self.norm(x).permute(0, 3, 4, 2, 1).reshape(b * h * w, f, c)
        tokens = tokens + self.pos[:f][None]
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c), dim=-1)
        out = self.proj(attn @ v)
        out = out.reshape(b, h, w, f, c).permute(0, 4, 3, 1, 2)
        return x + out


class EmaTracker:
    """Exponential moving average of a module's parameters."""

    def __init__(self, module: nn.Module, decay: float = 0.995):
        self.decay = decay
        self.shadow = {
            k: v.detach().clone() for k, v in module.state_dict().items()
        }

    @torch.no_grad()
    def update(self, module: nn.Module) -> None:
        for k, v in module.state_dict().items():
            if v.dtype.is_floating_point:
                self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1 - self.decay)
            else:
                self.shadow[k].copy_(v)

    def state_dict(self) -> dict:
        return self.shadow
