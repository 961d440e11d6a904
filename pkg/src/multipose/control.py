"""Per-character control encoders and region-masked residual fusion."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionParams, cross_attention_block
from .blocks import TEMB_DIM, WIDTHS, ConvBlock, Downsample, TimeMLP, zero_conv
from .errors import LayoutError, MissingLevelError, ShapeError
from .numeric import to_torch
from .prompts import D_TEXT

N_DOWN = 12
FUSION_MODES = ("first-unmasked", "eq3")


@dataclass
class ControlResiduals:
    """Twelve down-block taps (four size groups of three) plus one mid tap."""
    down: list
    mid: torch.Tensor

    def validate(self) -> "ControlResiduals":
        if len(self.down) != N_DOWN:
            raise LayoutError(f"expected {N_DOWN} down residuals, got {len(self.down)}")
        h, w = self.down[0].shape[-2:]
        for g in range(4):
            want = (h >> g, w >> g)
            for j in range(3):
                got = tuple(self.down[3 * g + j].shape[-2:])
                if got != want:
                    raise LayoutError(f"down residual {3 * g + j} has size {got}, expected {want}")
        if tuple(self.mid.shape[-2:]) != (h >> 3, w >> 3):
            raise LayoutError(f"mid residual has size {tuple(self.mid.shape[-2:])}, expected {(h >> 3, w >> 3)}")
        return self

    @property
    def sizes(self):
        return [tuple(d.shape[-2:]) for d in self.down], tuple(self.mid.shape[-2:])

    def scaled(self, factor: float) -> "ControlResiduals":
        return ControlResiduals([d * factor for d in self.down], self.mid * factor)

    def chunk(self, start: int, stop: int) -> "ControlResiduals":
        return ControlResiduals([d[start:stop] for d in self.down], self.mid[start:stop])

    @staticmethod
    def cat(items) -> "ControlResiduals":
        return ControlResiduals(
            [torch.cat([r.down[k] for r in items]) for k in range(N_DOWN)],
            torch.cat([r.mid for r in items]),
        )


class ControlEncoder(nn.Module):
    """Control encoder weights: a 4-level conv trunk with zero-initialized taps.

    Inputs are the noisy sample, the branch's pose map, the timestep and the
    branch's text embedding (cross-attention at the three finest levels).
    """

    def __init__(self, in_channels: int = 3, pose_channels: int = 3, widths=WIDTHS, d_text: int = D_TEXT):
        super().__init__()
        self.widths = tuple(widths)
        self.d_text = d_text
        self.time = TimeMLP(TEMB_DIM)
        w0 = widths[0]
        self.hint1 = nn.Conv2d(pose_channels, w0, 3, padding=1)
        self.hint2 = nn.Conv2d(w0, w0, 3, padding=1)
        self.conv_in = nn.Conv2d(in_channels, w0, 3, padding=1)
        self.entries = nn.ModuleList([Downsample(widths[l - 1], widths[l]) for l in range(1, 4)])
        self.blocks = nn.ModuleList()
        for l in range(4):
            self.blocks.append(ConvBlock(widths[l], widths[l]))
            self.blocks.append(ConvBlock(widths[l], widths[l]))
        self.attn = nn.ModuleList([AttentionParams(widths[l], d_text) for l in range(3)])
        self.attn_norm = nn.ModuleList([nn.GroupNorm(8, widths[l]) for l in range(3)])
        self.mid1 = ConvBlock(widths[3], widths[3])
        self.mid2 = ConvBlock(widths[3], widths[3])
        self.taps = nn.ModuleList([zero_conv(widths[g]) for g in range(4) for _ in range(3)])
        self.mid_tap = zero_conv(widths[3])

    def forward(self, x_t, pose, t, embeddings, chunk: int) -> ControlResiduals:
        """Run ``len(embeddings)`` branches stacked along the batch axis.

        ``x_t`` and ``pose`` are ``(branches * chunk) x C x H x W``; rows
        ``[i*chunk, (i+1)*chunk)`` use ``embeddings[i]``. ``t`` holds one
        timestep per row.
        """
        if pose.shape[-2:] != x_t.shape[-2:]:
            raise ShapeError(f"pose size {tuple(pose.shape[-2:])} != latent size {tuple(x_t.shape[-2:])}")
        if pose.shape[0] != x_t.shape[0] or x_t.shape[0] != chunk * len(embeddings):
            raise ShapeError("control batch does not match branches x frames")
        for e in embeddings:
            if e.values.shape[-1] != self.d_text:
                raise ShapeError(f"text embedding width {e.values.shape[-1]} != control d_text {self.d_text}")
        temb = self.time(t)
        h = self.conv_in(x_t) + self.hint2(F.silu(self.hint1(pose)))
        taps = []
        for l in range(4):
            if l > 0:
                h = self.entries[l - 1](h)
            taps.append(h)
            h = self.blocks[2 * l](h, temb)
            taps.append(h)
            h = self.blocks[2 * l + 1](h, temb)
            if l < 3:
                normed = self.attn_norm[l](h)
                parts = [
                    cross_attention_block(normed[i * chunk:(i + 1) * chunk], e, self.attn[l])
                    for i, e in enumerate(embeddings)
                ]
                h = h + torch.cat(parts)
            taps.append(h)
        mid = self.mid2(self.mid1(h, temb), temb)
        return ControlResiduals([tap(x) for tap, x in zip(self.taps, taps)], self.mid_tap(mid))


def control_branch_forward(pose, e, params: ControlEncoder, noisy_latent, t) -> ControlResiduals:
    """One branch: ``pose`` and ``noisy_latent`` are ``frames x C x H x W``."""
    pose_t, _ = to_torch(pose)
    pose_t = pose_t.to(noisy_latent.dtype)
    if pose_t.dim() == 3:
        pose_t = pose_t.unsqueeze(0)
    frames = noisy_latent.shape[0]
    tt = torch.as_tensor(t).reshape(-1)
    if tt.numel() == 1:
        tt = tt.expand(frames)
    return params(noisy_latent, pose_t, tt, [e], frames)


def run_branches(params: ControlEncoder, noisy_latent, t, poses, embeddings) -> list[ControlResiduals]:
    """Evaluate several branches in one batched pass; returns one result per branch."""
    frames = noisy_latent.shape[0]
    n = len(embeddings)
    pose_t = torch.cat([to_torch(p)[0].to(noisy_latent.dtype) for p in poses])
    x = noisy_latent.repeat(n, 1, 1, 1)
    tt = torch.as_tensor(t).reshape(-1)
    tt = (tt.expand(frames) if tt.numel() == 1 else tt).repeat(n)
    res = params(x, pose_t, tt, embeddings, frames)
    return [res.chunk(i * frames, (i + 1) * frames) for i in range(n)]


def _levels(pyr):
    return pyr.levels if hasattr(pyr, "levels") else list(pyr)


def _mask_for(levels, size, n_branches, like: torch.Tensor):
    for lvl in levels:
        if tuple(lvl.shape[-2:]) == tuple(size):
            m, _ = to_torch(lvl)
            m = m.to(like.dtype)
            if m.shape[-3] != n_branches:
                raise LayoutError(f"mask pyramid has {m.shape[-3]} regions for {n_branches} branches")
            return m if m.dim() == 4 else m.unsqueeze(0)
    raise MissingLevelError(f"mask pyramid has no level of size {tuple(size)}")


def _fuse(tensors, masks, mode):
    out = None
    for i, s in enumerate(tensors):
        term = s if (mode == "first-unmasked" and i == 0) else s * masks[:, i:i + 1]
        out = term if out is None else out + term
    return out


def fuse_control_residuals(branches, pyr, mode: str = "first-unmasked") -> ControlResiduals:
    """Combine branch residuals with region masks matched by spatial size.

    ``eq3`` weights every branch by its mask. ``first-unmasked`` adds branch 0
    as-is and weights the remaining branches by their masks.
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; choose from {FUSION_MODES}")
    if not branches:
        raise LayoutError("no control branches to fuse")
    for b in branches:
        b.validate()
    ref_sizes = branches[0].sizes
    for k, b in enumerate(branches[1:], start=1):
        if b.sizes != ref_sizes:
            raise LayoutError(f"branch {k} layout {b.sizes} differs from branch 0 layout {ref_sizes}")
        if any(x.shape != y.shape for x, y in zip(b.down, branches[0].down)):
            raise LayoutError(f"branch {k} tensor shapes differ from branch 0")
    levels = _levels(pyr)
    n = len(branches)
    down = []
    for k in range(N_DOWN):
        masks = _mask_for(levels, branches[0].down[k].shape[-2:], n, branches[0].down[k])
        down.append(_fuse([b.down[k] for b in branches], masks, mode))
    masks = _mask_for(levels, branches[0].mid.shape[-2:], n, branches[0].mid)
    mid = _fuse([b.mid for b in branches], masks, mode)
    return ControlResiduals(down, mid)
