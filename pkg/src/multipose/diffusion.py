"""Pixel-space denoiser, DDPM noise schedule and DDIM sampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionParams, cross_attention_block, spatial_aligned_cross_attention
from .blocks import TEMB_DIM, WIDTHS, ConvBlock, Downsample, TemporalAttention, TimeMLP, Upsample
from .errors import ScheduleRangeError, ShapeError
from .prompts import D_TEXT


@dataclass
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def check(self, t):
        arr = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
        if np.any(arr < 0) or np.any(arr >= self.T):
            raise ScheduleRangeError(f"timestep {arr.tolist()} outside [0, {self.T})")
        return arr.astype(np.int64)

    def ab(self, t, like: torch.Tensor) -> torch.Tensor:
        """``alpha_bar[t]`` broadcast against ``like`` (t scalar or one per row)."""
        idx = self.check(t)
        vals = torch.as_tensor(self.alpha_bars[idx], dtype=like.dtype)
        return vals.reshape(-1, *([1] * (like.dim() - 1))) if vals.dim() else vals


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``."""
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != sample shape {tuple(x0.shape)}")
    ab = sched.ab(t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps


def predict_x0(x_t, t, eps, sched: NoiseSchedule):
    """Invert the forward process given the noise."""
    ab = sched.ab(t, x_t)
    return (x_t - torch.sqrt(1 - ab) * eps) / torch.sqrt(ab)


@dataclass
class AttnCondition:
    """Text conditioning of one scene for the denoiser's attention layers.

    With ``pyramid`` set, the layers run the region-masked multi-prompt
    attention over ``embeddings``; without it, plain cross-attention on
    ``embeddings[0]``.
    """
    embeddings: list
    pyramid: object = None
    frames: int = 1


class Denoiser(nn.Module):
    """Four-level conv U-Net predicting noise.

    Down taps (12) are the points where control residuals are added to the
    skip connections; cross-attention runs at the three finest levels and
    frame-axis attention at the bottleneck.
    """

    def __init__(self, channels: int = 3, widths=WIDTHS, d_text: int = D_TEXT):
        super().__init__()
        self.widths = tuple(widths)
        self.time = TimeMLP(TEMB_DIM)
        self.conv_in = nn.Conv2d(channels, widths[0], 3, padding=1)
        self.entries = nn.ModuleList([Downsample(widths[l - 1], widths[l]) for l in range(1, 4)])
        self.down_blocks = nn.ModuleList()
        for l in range(4):
            self.down_blocks.append(ConvBlock(widths[l], widths[l]))
            self.down_blocks.append(ConvBlock(widths[l], widths[l]))
        self.down_attn = nn.ModuleList([AttentionParams(widths[l], d_text) for l in range(3)])
        self.down_norm = nn.ModuleList([nn.GroupNorm(8, widths[l]) for l in range(3)])
        self.mid1 = ConvBlock(widths[3], widths[3])
        self.temporal = TemporalAttention(widths[3])
        self.mid2 = ConvBlock(widths[3], widths[3])
        self.up_blocks = nn.ModuleList([ConvBlock(widths[l], widths[l]) for l in (3, 2, 1, 0) for _ in range(3)])
        self.up_attn = nn.ModuleList([AttentionParams(widths[l], d_text) for l in range(3)])
        self.up_norm = nn.ModuleList([nn.GroupNorm(8, widths[l]) for l in range(3)])
        self.ups = nn.ModuleList([Upsample(widths[l], widths[l - 1]) for l in (3, 2, 1)])
        self.out_norm = nn.GroupNorm(8, widths[0])
        self.conv_out = nn.Conv2d(widths[0], channels, 3, padding=1)

    def _attend(self, h, conds, params, norm, capture=None, tag=""):
        normed = norm(h)
        parts, row = [], 0
        for c in conds:
            chunk = normed[row:row + c.frames]
            if c.pyramid is None:
                part = cross_attention_block(chunk, c.embeddings[0], params)
            else:
                masks = c.pyramid.at(chunk.shape[-2:])
                if masks is None:
                    raise ShapeError(f"mask pyramid has no level of size {tuple(chunk.shape[-2:])}")
                branches = [] if capture is not None else None
                part = spatial_aligned_cross_attention(chunk, c.embeddings, masks, params, branch_outputs=branches)
                if capture is not None:
                    capture.append((tag, branches, masks))
            parts.append(part)
            row += c.frames
        if row != h.shape[0]:
            raise ShapeError(f"conditions cover {row} frames but batch has {h.shape[0]}")
        return h + torch.cat(parts)

    def forward(self, x, t, conds, control=None, capture=None, return_bottleneck=False):
        """Predict the noise in ``x`` (``rows x C x H x W``, scenes stacked).

        ``conds`` lists one ``AttnCondition`` per scene in row order; all
        scenes share one frame count. ``control`` is the fused
        ``ControlResiduals`` for the whole batch, or ``None``.
        """
        h_in, w_in = x.shape[-2:]
        if h_in % 8 or w_in % 8:
            raise ShapeError(f"sample size {h_in}x{w_in} must be divisible by 8")
        frames = conds[0].frames
        if any(c.frames != frames for c in conds):
            raise ShapeError("all scenes in a batch must have the same frame count")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        temb = self.time(t)
        h = self.conv_in(x)
        skips = [h]
        for l in range(4):
            if l > 0:
                h = self.entries[l - 1](h)
                skips.append(h)
            h = self.down_blocks[2 * l](h, temb)
            skips.append(h)
            h = self.down_blocks[2 * l + 1](h, temb)
            if l < 3:
                h = self._attend(h, conds, self.down_attn[l], self.down_norm[l], capture, f"down{l}")
            skips.append(h)
        if control is not None:
            if len(control.down) != len(skips):
                raise ShapeError(f"{len(control.down)} control residuals for {len(skips)} skips")
            skips = [s + c for s, c in zip(skips, control.down)]
        h = self.mid1(h, temb)
        if return_bottleneck:
            return h
        h = self.temporal(h, frames)
        h = self.mid2(h, temb)
        if control is not None:
            h = h + control.mid
        k = 0
        for i, l in enumerate((3, 2, 1, 0)):
            for _ in range(3):
                h = self.up_blocks[k](h + skips.pop(), temb)
                k += 1
            if l < 3:
                h = self._attend(h, conds, self.up_attn[l], self.up_norm[l], capture, f"up{l}")
            if l > 0:
                h = self.ups[i](h)
        return self.conv_out(F.silu(self.out_norm(h)))


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(np.int64))[::-1]


@torch.no_grad()
def ddim_sample(eps_fn, shape, sched: NoiseSchedule, steps: int = 50, generator=None,
                x_T=None, clip_x0: bool = True, dtype=torch.float32):
    """Deterministic (eta = 0) DDIM from pure noise.

    ``eps_fn(x_t, t)`` returns the predicted noise for integer step ``t``.
    """
    x = torch.randn(shape, generator=generator, dtype=dtype) if x_T is None else x_T.clone()
    ts = ddim_timesteps(sched.T, steps)
    for i, t in enumerate(ts):
        ab = float(sched.alpha_bars[t])
        ab_prev = float(sched.alpha_bars[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        eps = eps_fn(x, int(t))
        x0 = (x - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
        if clip_x0:
            x0 = x0.clamp(-1, 1)
            eps = (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
        x = np.sqrt(ab_prev) * x0 + np.sqrt(1 - ab_prev) * eps
    return x
