"""Pose track loading, validation and rasterization."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateIdError,
    FrameCountError,
    KeypointRangeError,
    NonContiguousIdError,
    PoseSchemaError,
)

# 18-joint body: nose, neck, r-shoulder, r-elbow, r-wrist, l-shoulder, l-elbow,
# l-wrist, r-hip, r-knee, r-ankle, l-hip, l-knee, l-ankle, r-eye, l-eye, r-ear, l-ear
BODY18_LIMBS = [
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13), (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
]

LIMB_COLORS = np.array([
    [255, 0, 0], [255, 85, 0], [255, 170, 0], [255, 255, 0], [170, 255, 0],
    [85, 255, 0], [0, 255, 0], [0, 255, 85], [0, 255, 170], [0, 255, 255],
    [0, 170, 255], [0, 85, 255], [0, 0, 255], [85, 0, 255], [170, 0, 255],
    [255, 0, 255], [255, 0, 170], [255, 0, 85],
], dtype=np.float32) / 255.0

DEFAULT_THICKNESS = 2.0


@dataclass
class CharacterTrack:
    id: int
    keypoints: np.ndarray  # frames x joints x (x, y, confidence)

    @property
    def n_frames(self) -> int:
        return self.keypoints.shape[0]


@dataclass
class PoseTrackSet:
    width: int
    height: int
    fps: float
    characters: list[CharacterTrack]
    skeleton: list[tuple[int, int]] = field(default_factory=lambda: list(BODY18_LIMBS))

    @property
    def n_characters(self) -> int:
        return len(self.characters)

    @property
    def n_frames(self) -> int:
        return self.characters[0].n_frames if self.characters else 0

    def validate(self) -> "PoseTrackSet":
        if not self.characters:
            raise PoseSchemaError("pose file lists no characters")
        counts = {c.id: c.n_frames for c in self.characters}
        if len(set(counts.values())) > 1:
            raise FrameCountError(f"characters have unequal frame counts: {counts}")
        if self.n_frames < 1:
            raise FrameCountError("character tracks are empty")
        ids = [c.id for c in self.characters]
        if len(set(ids)) != len(ids):
            raise DuplicateIdError(f"duplicate character ids in {ids}")
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise NonContiguousIdError(f"character ids must be 1..{len(ids)}, got {sorted(ids)}")
        n_joints = {c.keypoints.shape[1] for c in self.characters}
        if len(n_joints) > 1:
            raise PoseSchemaError(f"characters use different joint counts: {sorted(n_joints)}")
        j = n_joints.pop()
        for a, b in self.skeleton:
            if not (0 <= a < j and 0 <= b < j):
                raise PoseSchemaError(f"skeleton limb ({a}, {b}) references a joint outside 0..{j - 1}")
        for c in self.characters:
            kp = c.keypoints
            conf = kp[..., 2]
            if np.any((conf < 0) | (conf > 1)):
                raise KeypointRangeError(f"character {c.id}: confidence outside [0, 1]")
            vis = conf > 0
            x, y = kp[..., 0][vis], kp[..., 1][vis]
            bad = (x < 0) | (x >= self.width) | (y < 0) | (y >= self.height)
            if np.any(bad):
                f, jj = np.argwhere(vis)[np.argmax(bad)]
                raise KeypointRangeError(
                    f"character {c.id}, frame {f}, joint {jj}: keypoint "
                    f"({kp[f, jj, 0]}, {kp[f, jj, 1]}) outside {self.width}x{self.height} canvas"
                )
        self.characters.sort(key=lambda c: c.id)
        return self

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fps": self.fps,
            "skeleton": [list(p) for p in self.skeleton],
            "characters": [
                {"id": c.id, "frames": [{"keypoints": fr.tolist()} for fr in c.keypoints]}
                for c in self.characters
            ],
        }


def parse_pose_dict(doc) -> PoseTrackSet:
    if not isinstance(doc, dict):
        raise PoseSchemaError("pose document must be a JSON object")
    try:
        width, height = int(doc["width"]), int(doc["height"])
        fps = float(doc.get("fps", 8))
        skeleton = [tuple(int(i) for i in pair) for pair in doc.get("skeleton", BODY18_LIMBS)]
        chars = []
        for entry in doc["characters"]:
            frames = [np.asarray(fr["keypoints"], dtype=np.float64) for fr in entry["frames"]]
            if frames and any(f.ndim != 2 or f.shape[1] != 3 for f in frames):
                raise PoseSchemaError(f"character {entry.get('id')}: keypoints must be [x, y, c] triples")
            if len({f.shape[0] for f in frames}) > 1:
                raise PoseSchemaError(f"character {entry.get('id')}: joint count varies across frames")
            kp = np.stack(frames) if frames else np.zeros((0, 0, 3))
            chars.append(CharacterTrack(id=int(entry["id"]), keypoints=kp))
    except PoseSchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise PoseSchemaError(f"malformed pose document: {exc}") from exc
    if width < 1 or height < 1:
        raise PoseSchemaError(f"canvas must be positive, got {width}x{height}")
    if any(len(p) != 2 for p in skeleton):
        raise PoseSchemaError("skeleton entries must be joint-index pairs")
    return PoseTrackSet(width, height, fps, chars, skeleton).validate()


def load_pose_json(path) -> PoseTrackSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PoseSchemaError(f"{path}: invalid JSON ({exc})") from exc
    return parse_pose_dict(doc)


def save_pose_json(poses: PoseTrackSet, path) -> None:
    Path(path).write_text(json.dumps(poses.to_dict()))


def _segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    seg2 = dx * dx + dy * dy
    if seg2 == 0:
        return np.hypot(px - ax, py - ay)
    u = np.clip(((px - ax) * dx + (py - ay) * dy) / seg2, 0.0, 1.0)
    return np.hypot(px - (ax + u * dx), py - (ay + u * dy))


def _stamp(canvas, color, dist_fn, x0, x1, y0, y1, radius):
    h, w = canvas.shape[-2:]
    c0, c1 = max(int(np.floor(x0 - radius)), 0), min(int(np.ceil(x1 + radius)), w - 1)
    r0, r1 = max(int(np.floor(y0 - radius)), 0), min(int(np.ceil(y1 + radius)), h - 1)
    if c0 > c1 or r0 > r1:
        return
    rows, cols = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    hit = dist_fn(cols.astype(np.float64), rows.astype(np.float64)) <= radius + 1e-9
    for ch in range(canvas.shape[0]):
        view = canvas[ch, r0:r1 + 1, c0:c1 + 1]
        view[hit] = color[ch]


def rasterize_frame(keypoints, width, height, skeleton=BODY18_LIMBS,
                    thickness=DEFAULT_THICKNESS, channels=3, palette=None):
    """Draw one frame's skeleton as a ``channels x height x width`` map.

    Pixel ``(row, col)`` sits at coordinate ``(x=col, y=row)``. A limb covers
    every pixel within ``thickness / 2`` of its segment; a joint covers the
    disc of radius ``thickness``. Only confidence > 0 joints are drawn.
    ``palette`` overrides the per-limb colors with one RGB triple.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    canvas = np.zeros((channels, height, width), dtype=np.float32)

    def color_for(idx):
        if channels == 1:
            return np.ones(1, dtype=np.float32)
        if palette is not None:
            return np.asarray(palette, dtype=np.float32)
        return LIMB_COLORS[idx % len(LIMB_COLORS)]

    vis = kp[:, 2] > 0
    half = thickness / 2.0
    for li, (a, b) in enumerate(skeleton):
        if not (vis[a] and vis[b]):
            continue
        ax, ay, bx, by = kp[a, 0], kp[a, 1], kp[b, 0], kp[b, 1]
        _stamp(canvas, color_for(li),
               lambda px, py: _segment_distance(px, py, ax, ay, bx, by),
               min(ax, bx), max(ax, bx), min(ay, by), max(ay, by), half)
    for j in np.flatnonzero(vis):
        jx, jy = kp[j, 0], kp[j, 1]
        _stamp(canvas, color_for(j),
               lambda px, py: np.hypot(px - jx, py - jy),
               jx, jx, jy, jy, float(thickness))
    return canvas


def rasterize_pose(track, width, height, limb_thickness=DEFAULT_THICKNESS,
                   skeleton=BODY18_LIMBS, channels=3, palette=None):
    """Rasterize every frame of one character: ``frames x channels x H x W``."""
    kp = track.keypoints if isinstance(track, CharacterTrack) else np.asarray(track)
    if limb_thickness < 1:
        raise ValueError(f"limb_thickness must be >= 1, got {limb_thickness}")
    return np.stack([
        rasterize_frame(fr, width, height, skeleton, limb_thickness, channels, palette)
        for fr in kp
    ])


def rasterize_all(poses: PoseTrackSet, limb_thickness=DEFAULT_THICKNESS, channels=3):
    """Per-character pose maps: ``characters x frames x channels x H x W``."""
    return np.stack([
        rasterize_pose(c, poses.width, poses.height, limb_thickness, poses.skeleton, channels)
        for c in poses.characters
    ])


def composite(pose_maps):
    """Full-canvas pose map holding every character (pixelwise max)."""
    return np.max(np.asarray(pose_maps), axis=0)
