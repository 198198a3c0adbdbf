"""Conditional noise-prediction networks.

The reference denoiser is a small U-Net: two stride-2 downsamplings with
skip connections back up, residual blocks throughout, the timestep injected
via a sinusoidal embedding, and class/domain injected via learned embeddings
summed into the time embedding. The class table has ``num_classes + 1``
rows; the extra row is the learned null token used for the unconditional
pathway (it is a distinct token, never class 0).

Any module with the same ``forward(x, t, class_idx, domain_idx) -> eps``
signature and output shape is a valid predictor for the sampling loops.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_CLASSES = 26
NULL_CLASS = NUM_CLASSES  # embedding row reserved for the null token
NUM_DOMAINS = 2


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style embedding of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        groups = math.gcd(8, c_out)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.emb_proj = nn.Linear(emb_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class ConditionalDenoiser(nn.Module):
    """U-Net predicting the noise component of a noisy glyph image."""

    def __init__(self, base_channels: int = 16, emb_dim: int = 48,
                 num_classes: int = NUM_CLASSES, num_domains: int = NUM_DOMAINS):
        super().__init__()
        c = base_channels
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.class_embed = nn.Embedding(num_classes + 1, emb_dim)  # +1: null token
        self.domain_embed = nn.Embedding(num_domains, emb_dim)
        self.emb_dim = emb_dim

        self.block_in = ResBlock(1, c, emb_dim)
        self.down1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.block_mid1 = ResBlock(c, 2 * c, emb_dim)
        self.down2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.block_bottom = ResBlock(2 * c, 2 * c, emb_dim)
        self.up2 = nn.ConvTranspose2d(2 * c, 2 * c, 4, stride=2, padding=1)
        self.block_mid2 = ResBlock(4 * c, c, emb_dim)
        self.up1 = nn.ConvTranspose2d(c, c, 4, stride=2, padding=1)
        self.block_out = ResBlock(2 * c, c, emb_dim)
        self.conv_out = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor,
                class_idx: torch.Tensor, domain_idx: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(sinusoidal_embedding(t, self.emb_dim))
        emb = emb + self.class_embed(class_idx) + self.domain_embed(domain_idx)

        h1 = self.block_in(x, emb)
        h2 = self.block_mid1(self.down1(h1), emb)
        h = self.block_bottom(self.down2(h2), emb)
        h = self.block_mid2(torch.cat([self.up2(h), h2], dim=1), emb)
        h = self.block_out(torch.cat([self.up1(h), h1], dim=1), emb)
        return self.conv_out(h)


class SplitDenoiser(nn.Module):
    """Two per-domain denoisers behind the joint predictor interface.

    Rows are routed to the subnet selected by ``domain_idx``; each subnet
    still receives the domain token so both modes share one contract.
    """

    def __init__(self, base_channels: int = 16, emb_dim: int = 48,
                 num_classes: int = NUM_CLASSES):
        super().__init__()
        self.nets = nn.ModuleList([
            ConditionalDenoiser(base_channels, emb_dim, num_classes) for _ in range(NUM_DOMAINS)
        ])

    def forward(self, x, t, class_idx, domain_idx):
        out = torch.zeros_like(x)
        for d, net in enumerate(self.nets):
            mask = domain_idx == d
            if mask.any():
                out[mask] = net(x[mask], t[mask], class_idx[mask], domain_idx[mask])
        return out
