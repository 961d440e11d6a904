"""Dense tensor primitives used across the engine.

Every function accepts either a ``numpy.ndarray`` or a ``torch.Tensor`` and
returns the same kind it was given. Torch inputs keep their autograd graph,
so the same primitives serve the trainable model and the plain-array
pipeline (masks, metrics). Computation happens in the input's dtype:
float32 for the engine, float64 when checking gradients.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, ShapeError

__all__ = ["matmul", "softmax_lastdim", "resize", "attention", "to_torch", "like_input"]


def to_torch(x):
    """Return ``(tensor, was_numpy)``."""
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr)), True


def like_input(t: torch.Tensor, was_numpy: bool):
    return t.detach().numpy() if was_numpy else t


def matmul(a, b):
    """Matrix product of ``a[..., m, k]`` and ``b[..., k, n]``.

    Delegates to a single BLAS call per batch; with a fixed thread count the
    accumulation order is fixed and results are bit-reproducible.
    """
    ta, na = to_torch(a)
    tb, nb = to_torch(b)
    if ta.dim() < 2 or tb.dim() < 2:
        raise ShapeError(f"matmul needs matrices, got dims {tuple(ta.shape)} and {tuple(tb.shape)}")
    if ta.shape[-1] != tb.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: a is {tuple(ta.shape)} (k={ta.shape[-1]}), "
            f"b is {tuple(tb.shape)} (k={tb.shape[-2]})"
        )
    if ta.dtype != tb.dtype:
        tb = tb.to(ta.dtype)
    return like_input(torch.matmul(ta, tb), na and nb)


def softmax_lastdim(x, scale: float = 1.0):
    """``exp(scale*x - max)`` normalized along the last axis."""
    t, was_np = to_torch(x)
    if t.dim() == 0 or t.shape[-1] < 1:
        raise ShapeError(f"softmax needs a last extent >= 1, got {tuple(t.shape)}")
    if not bool(torch.isfinite(t).all()):
        raise NumericError("softmax input contains non-finite values")
    z = t * scale
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return like_input(e / e.sum(dim=-1, keepdim=True), was_np)


def resize(x, target: tuple[int, int], mode: str = "bilinear"):
    """Resize the two trailing axes of ``x`` to ``target``.

    ``nearest`` samples ``src = floor(dst * h / h')``. ``bilinear`` uses the
    align-corners-false convention: destination pixel ``i`` samples source
    coordinate ``(i + 0.5) * h / h' - 0.5``, clamped to the edge.
    Leading axes are treated as a batch.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ShapeError(f"resize target extents must be >= 1, got {(th, tw)}")
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown resize mode {mode!r}")
    t, was_np = to_torch(x)
    if t.dim() < 2:
        raise ShapeError(f"resize needs at least 2 dims, got {tuple(t.shape)}")
    lead = t.shape[:-2]
    h, w = t.shape[-2:]
    if (h, w) == (th, tw):
        return like_input(t.clone(), was_np)
    flat = t.reshape(-1, 1, h, w)
    if mode == "nearest":
        out = F.interpolate(flat, size=(th, tw), mode="nearest")
    else:
        out = F.interpolate(flat, size=(th, tw), mode="bilinear", align_corners=False, antialias=False)
    return like_input(out.reshape(*lead, th, tw), was_np)


def attention(q, k, v, key_mask=None):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``.

    ``q`` is ``[..., n_q, d]``, ``k`` is ``[..., n_k, d]``, ``v`` is
    ``[..., n_k, d_v]``. ``key_mask`` (boolean ``[..., n_k]``) drops padded
    keys; at least one key per row must survive.
    """
    tq, nq = to_torch(q)
    tk, nk = to_torch(k)
    tv, nv = to_torch(v)
    if tq.shape[-1] != tk.shape[-1]:
        raise ShapeError(f"attention: query dim {tq.shape[-1]} != key dim {tk.shape[-1]}")
    if tk.shape[-2] != tv.shape[-2]:
        raise ShapeError(f"attention: {tk.shape[-2]} keys but {tv.shape[-2]} values")
    d = tq.shape[-1]
    logits = torch.matmul(tq, tk.transpose(-1, -2)) / math.sqrt(d)
    if key_mask is not None:
        km, _ = to_torch(key_mask)
        logits = logits.masked_fill(~km.bool().unsqueeze(-2), float("-inf"))
    logits = logits - logits.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(logits)
    weights = e / e.sum(dim=-1, keepdim=True)
    return like_input(torch.matmul(weights, tv), nq and nk and nv)
