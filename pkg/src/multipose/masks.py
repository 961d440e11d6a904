"""Region masks from pose maps: bbox extraction, softmax normalization, pyramids."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ShapeError
from .numeric import resize, softmax_lastdim

EMPTY_BBOX = (-1, -1, -1, -1)


def extract_bbox_mask(pose_map_frame):
    """Binary rectangle spanning the nonzero pixels of ``pose_map_frame``.

    Accepts ``channels x h x w`` or ``h x w``. Returns ``(mask, bbox)`` with
    bbox ``(row_min, row_max, col_min, col_max)`` inclusive; an empty map
    gives an all-zero mask and ``EMPTY_BBOX``.
    """
    arr = np.asarray(pose_map_frame)
    if arr.ndim == 2:
        arr = arr[None]
    occupied = np.any(arr != 0, axis=0)
    mask = np.zeros(occupied.shape, dtype=np.float32)
    rows = np.flatnonzero(occupied.any(axis=1))
    if rows.size == 0:
        return mask, EMPTY_BBOX
    cols = np.flatnonzero(occupied.any(axis=0))
    bbox = (int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))
    mask[bbox[0]:bbox[1] + 1, bbox[2]:bbox[3] + 1] = 1.0
    return mask, bbox


@dataclass
class RegionMasks:
    masks: np.ndarray  # frames x characters x h x w, binary
    bboxes: list  # [frame][character] -> bbox tuple


def region_masks(pose_maps) -> RegionMasks:
    """Bbox masks for ``characters x frames x channels x h x w`` pose maps."""
    pm = np.asarray(pose_maps)
    n, f = pm.shape[:2]
    masks = np.zeros((f, n) + pm.shape[-2:], dtype=np.float32)
    bboxes = [[EMPTY_BBOX] * n for _ in range(f)]
    for i in range(n):
        for t in range(f):
            masks[t, i], bboxes[t][i] = extract_bbox_mask(pm[i, t])
    return RegionMasks(masks, bboxes)


def normalize_masks(masks, sharpness: float = 1.0):
    """Per-pixel softmax across characters (axis ``-3``), scaled by ``sharpness``.

    ``masks`` is ``N x h x w`` or ``frames x N x h x w``.
    """
    arr = np.asarray(masks, dtype=np.float32)
    if arr.ndim < 3:
        raise ShapeError(f"expected N x h x w masks, got shape {arr.shape}")
    if sharpness < 1:
        raise ValueError(f"sharpness must be >= 1, got {sharpness}")
    moved = np.moveaxis(arr, -3, -1)
    return np.ascontiguousarray(np.moveaxis(softmax_lastdim(moved, sharpness), -1, -3))


@dataclass
class MaskPyramid:
    """Normalized masks at full, 1/2, 1/4 and 1/8 resolution.

    Each level is ``frames x N x h_l x w_l``. ``group_a`` feeds the
    spatial-aligned cross-attention, ``group_b`` the control down taps and
    ``group_c`` the control mid tap.
    """
    levels: list

    @property
    def group_a(self):
        return self.levels[:3]

    @property
    def group_b(self):
        return self.levels[:4]

    @property
    def group_c(self):
        return self.levels[3:4]

    @property
    def n_characters(self) -> int:
        return self.levels[0].shape[-3]

    @property
    def sizes(self):
        return [tuple(l.shape[-2:]) for l in self.levels]

    def at(self, size):
        """Level whose spatial size equals ``size``."""
        for l in self.levels:
            if tuple(l.shape[-2:]) == tuple(size):
                return l
        return None


def build_pyramids(normalized, mode: str = "bilinear") -> MaskPyramid:
    """Resize full-resolution normalized masks to the four pyramid sizes.

    Every level is resized straight from full resolution and renormalized so
    the per-pixel sum over characters is one again.
    """
    arr = np.asarray(normalized, dtype=np.float32)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    h, w = arr.shape[-2:]
    if h % 8 or w % 8:
        raise GeometryError(f"mask size {h}x{w} must be divisible by 8")
    levels = []
    for div in (1, 2, 4, 8):
        lvl = resize(arr, (h // div, w // div), mode=mode)
        lvl = lvl / lvl.sum(axis=-3, keepdims=True)
        levels.append(lvl[0] if squeeze else lvl)
    return MaskPyramid(levels)


def mask_flow(pose_maps, sharpness: float = 1.0, mode: str = "bilinear"):
    """Pose maps -> (RegionMasks, MaskPyramid) for every frame."""
    regions = region_masks(pose_maps)
    return regions, build_pyramids(normalize_masks(regions.masks, sharpness), mode=mode)


def ones_pyramid(frames: int, h: int, w: int) -> MaskPyramid:
    """Single-region pyramid covering the whole canvas."""
    return build_pyramids(np.ones((frames, 1, h, w), dtype=np.float32))
