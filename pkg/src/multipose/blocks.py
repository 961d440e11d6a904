"""Convolutional building blocks shared by the denoiser and control encoder."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .numeric import attention

WIDTHS = (16, 32, 64, 128)
TEMB_DIM = 64
N_GROUPS = 8


def timestep_embedding(t: torch.Tensor, dim: int = TEMB_DIM) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, ``len(t) x dim``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeMLP(nn.Module):
    def __init__(self, dim: int = TEMB_DIM):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t):
        emb = timestep_embedding(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(emb)))


class ConvBlock(nn.Module):
    """``x + conv(silu(norm(x))) + time bias`` with a 1x1 skip when widths differ."""

    def __init__(self, c_in: int, c_out: int, temb_dim: int = TEMB_DIM):
        super().__init__()
        self.norm = nn.GroupNorm(N_GROUPS, c_in)
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x, temb):
        h = self.conv(F.silu(self.norm(x))) + self.temb(temb)[:, :, None, None]
        return (x if self.skip is None else self.skip(x)) + h


class Downsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def zero_conv(c: int) -> nn.Conv2d:
    conv = nn.Conv2d(c, c, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class TemporalAttention(nn.Module):
    """Self-attention across frames at each spatial position.

    Values are the features themselves and the output is
    ``x + (A x - x) W_o``, so a single frame passes through unchanged and,
    with no positional encoding, the layer is equivariant to frame order.
    """

    def __init__(self, channels: int, d_attn: int = 32):
        super().__init__()
        self.norm = nn.GroupNorm(N_GROUPS, channels)
        self.wq = nn.Parameter(torch.randn(channels, d_attn) / math.sqrt(channels))
        self.wk = nn.Parameter(torch.randn(channels, d_attn) / math.sqrt(channels))
        self.wo = nn.Parameter(torch.zeros(channels, channels))

    def forward(self, x, frames: int):
        """``x`` is ``(scenes * frames) x C x h x w``."""
        bf, c, h, w = x.shape
        seq = x.reshape(bf // frames, frames, c, h * w).permute(0, 3, 1, 2)  # S, hw, F, C
        normed = self.norm(x).reshape(bf // frames, frames, c, h * w).permute(0, 3, 1, 2)
        mixed = attention(torch.matmul(normed, self.wq), torch.matmul(normed, self.wk), seq)
        out = seq + torch.matmul(mixed - seq, self.wo)
        return out.permute(0, 2, 3, 1).reshape(bf, c, h, w)
