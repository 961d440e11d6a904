"""Text cross-attention and its region-masked multi-prompt extension."""
from __future__ import annotations

import math

import torch
from torch import nn

from .errors import MaskPartitionError, ShapeError
from .numeric import attention, to_torch

PARTITION_TOL = 1e-3


class AttentionParams(nn.Module):
    """Projection matrices of one cross-attention layer.

    ``wq``: d_model x d_attn, ``wk``/``wv``: d_text x d_attn,
    ``wo``: d_attn x d_model.
    """

    def __init__(self, d_model: int, d_text: int, d_attn: int | None = None, generator=None, zero_out=False):
        super().__init__()
        d_attn = d_attn or d_model
        self.d_model, self.d_text, self.d_attn = d_model, d_text, d_attn

        def init(fan_in, fan_out):
            return nn.Parameter(torch.randn(fan_in, fan_out, generator=generator) / math.sqrt(fan_in))

        self.wq = init(d_model, d_attn)
        self.wk = init(d_text, d_attn)
        self.wv = init(d_text, d_attn)
        self.wo = init(d_attn, d_model)
        if zero_out:
            with torch.no_grad():
                self.wo.zero_()


def _check_embedding(e, p: AttentionParams):
    if e.values.shape[-1] != p.d_text:
        raise ShapeError(f"text embedding width {e.values.shape[-1]} != attention d_text {p.d_text}")


def _queries(h: torch.Tensor, p: AttentionParams) -> torch.Tensor:
    if h.dim() != 4:
        raise ShapeError(f"hidden states must be frames x channels x h x w, got {tuple(h.shape)}")
    if h.shape[1] != p.d_model:
        raise ShapeError(f"hidden channels {h.shape[1]} != attention d_model {p.d_model}")
    return torch.matmul(h.flatten(2).transpose(1, 2), p.wq)


def _attend(q: torch.Tensor, shape, e, p: AttentionParams) -> torch.Tensor:
    _check_embedding(e, p)
    vals = e.values.to(q.dtype)
    k = torch.matmul(vals, p.wk)
    v = torch.matmul(vals, p.wv)
    out = torch.matmul(attention(q, k, v, key_mask=e.key_mask), p.wo)
    f, c, hh, ww = shape
    return out.transpose(1, 2).reshape(f, c, hh, ww)


def cross_attention_block(h: torch.Tensor, e, p: AttentionParams) -> torch.Tensor:
    """Queries from every spatial position of ``h``, keys/values from ``e``.

    Returns the projected attention output with the same shape as ``h``; the
    caller adds the residual.
    """
    return _attend(_queries(h, p), h.shape, e, p)


def check_partition(masks: torch.Tensor, size, tol: float = PARTITION_TOL):
    if tuple(masks.shape[-2:]) != tuple(size):
        raise ShapeError(f"mask size {tuple(masks.shape[-2:])} != hidden size {tuple(size)}")
    dev = (masks.sum(dim=-3) - 1).abs().max().item()
    if dev > tol:
        raise MaskPartitionError(f"masks deviate from a partition of unity by {dev:.3g} (> {tol})")


def spatial_aligned_cross_attention(h, embeddings, masks, p: AttentionParams, validate=True, branch_outputs=None):
    """Region-masked sum of per-prompt cross-attention outputs.

    ``masks`` is ``N x h x w`` or ``frames x N x h x w`` and must sum to one
    per pixel. All branches share ``p``; they differ only in embedding and
    mask. Branches are summed in ascending order. If ``branch_outputs`` is a
    list, the unmasked per-branch outputs are appended to it.
    """
    m, _ = to_torch(masks)
    m = m.to(h.dtype)
    if m.dim() == 3:
        m = m.unsqueeze(0).expand(h.shape[0], -1, -1, -1)
    if m.shape[-3] != len(embeddings):
        raise ShapeError(f"{len(embeddings)} embeddings but {m.shape[-3]} masks")
    if validate:
        check_partition(m, h.shape[-2:])
    q = _queries(h, p)
    out = None
    for i, e in enumerate(embeddings):
        branch = _attend(q, h.shape, e, p)
        if branch_outputs is not None:
            branch_outputs.append(branch)
        term = branch * m[:, i:i + 1]
        out = term if out is None else out + term
    return out
