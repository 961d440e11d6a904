"""Synthetic multi-character scenes and toy-scale evaluation metrics.

Characters are stick figures on a gray background; the limb color encodes
the character's class, so color templates double as a classifier.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import SpawnError
from .masks import EMPTY_BBOX, region_masks
from .numeric import resize
from .prompts import parse_prompt, split_prompt, tokenize_embed
from .poses import BODY18_LIMBS, CharacterTrack, PoseTrackSet, load_pose_json, rasterize_frame, rasterize_all, save_pose_json

log = logging.getLogger(__name__)

CLASS_NAMES = ("red", "green", "blue", "yellow")
CLASS_COLORS = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.10, 0.20, 0.90],
    [0.90, 0.85, 0.10],
], dtype=np.float32)
BACKGROUND = np.array([0.5, 0.5, 0.5], dtype=np.float32)
BACKGROUND_TEXT = "on gray background"

# joint offsets (x, y) in units of figure height, head at the top
_BODY = np.array([
    [0.00, 0.08], [0.00, 0.20], [-0.13, 0.22], [-0.18, 0.38], [-0.20, 0.52],
    [0.13, 0.22], [0.18, 0.38], [0.20, 0.52], [-0.08, 0.55], [-0.10, 0.75],
    [-0.10, 0.97], [0.08, 0.55], [0.10, 0.75], [0.10, 0.97], [-0.03, 0.06],
    [0.03, 0.06], [-0.06, 0.07], [0.06, 0.07],
])
_ARM_SWING = {3: 0.06, 4: 0.12, 6: -0.06, 7: -0.12}
_LEG_SWING = {9: -0.06, 10: -0.12, 12: 0.06, 13: 0.12}


def caption_for(labels) -> str:
    parts = [f"{CLASS_NAMES[c]}<{i + 1}>" for i, c in enumerate(labels)]
    return ", ".join(parts + [BACKGROUND_TEXT])


@dataclass
class SceneSpec:
    labels: list  # class index per character
    poses: PoseTrackSet
    caption: str

    @property
    def n_characters(self) -> int:
        return len(self.labels)


@dataclass
class SceneSample:
    spec: SceneSpec
    frames: np.ndarray  # F x 3 x H x W in [0, 1]
    masks: np.ndarray  # F x N x H x W ground-truth bbox masks
    bboxes: list = field(default_factory=list)


def _walk(rng, frames, height_px, cx, cy_top, vx):
    phase = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.5, 1.0) * 2 * np.pi / frames
    kp = np.zeros((frames, len(_BODY), 3))
    for f in range(frames):
        s = np.sin(phase + speed * f)
        off = _BODY.copy()
        for j, a in _ARM_SWING.items():
            off[j, 0] += a * s
        for j, a in _LEG_SWING.items():
            off[j, 0] += a * s
        kp[f, :, 0] = cx + vx * f + off[:, 0] * height_px
        kp[f, :, 1] = cy_top + off[:, 1] * height_px + 0.5 * abs(s)
        kp[f, :, 2] = 1.0
    return kp


def _track_box(kp, margin):
    x, y = kp[..., 0], kp[..., 1]
    return x.min() - margin, x.max() + margin, y.min() - margin, y.max() + margin


def _overlap(a, b) -> float:
    iw = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[2], b[2]))
    smaller = min((a[1] - a[0]) * (a[3] - a[2]), (b[1] - b[0]) * (b[3] - b[2]))
    return iw * ih / smaller


def random_scene(rng, n_characters=2, canvas=64, frames=8, max_overlap=0.05,
                 thickness=2.0, labels=None) -> SceneSpec:
    """Draw classes and non-overlapping walking trajectories for one scene."""
    if n_characters not in (1, 2, 3):
        raise ValueError(f"scenes hold 1-3 characters, got {n_characters}")
    if labels is None:
        labels = [int(c) for c in rng.choice(len(CLASS_NAMES), size=n_characters, replace=False)]
    margin = thickness + 1
    # three figures only fit side by side on a small canvas if they are shorter
    h_lo, h_hi, drift = (0.40, 0.62, 0.6) if n_characters < 3 else (0.26, 0.36, 0.3)
    for _ in range(100):
        tracks, boxes = [], []
        for _ in range(n_characters):
            h_px = rng.uniform(h_lo, h_hi) * canvas
            half_w = 0.20 * h_px + margin
            vx = rng.uniform(-drift, drift)
            lo = half_w + max(0.0, -vx * (frames - 1))
            hi = canvas - 1 - half_w - max(0.0, vx * (frames - 1))
            if lo >= hi:
                break
            cx = rng.uniform(lo, hi)
            top = rng.uniform(margin + 1, canvas - 1 - margin - 1 - 0.98 * h_px)
            kp = _walk(rng, frames, h_px, cx, top, vx)
            tracks.append(kp)
            boxes.append(_track_box(kp, margin))
        if len(tracks) < n_characters:
            continue
        if any(_overlap(boxes[i], boxes[j]) > max_overlap
               for i in range(n_characters) for j in range(i + 1, n_characters)):
            continue
        if any(b[0] < 0 or b[2] < 0 or b[1] > canvas - 1 or b[3] > canvas - 1 for b in boxes):
            continue
        chars = [CharacterTrack(i + 1, kp) for i, kp in enumerate(tracks)]
        poses = PoseTrackSet(canvas, canvas, 8.0, chars, list(BODY18_LIMBS)).validate()
        return SceneSpec(labels, poses, caption_for(labels))
    raise SpawnError(f"could not place {n_characters} characters without overlap after 100 tries")


def render_scene(spec: SceneSpec, thickness=2.0, labels=None) -> np.ndarray:
    """Ground-truth frames: class-colored figures drawn in id order on gray."""
    labels = spec.labels if labels is None else labels
    p = spec.poses
    out = np.empty((p.n_frames, 3, p.height, p.width), dtype=np.float32)
    out[:] = BACKGROUND[None, :, None, None]
    for c, lab in zip(p.characters, labels):
        for f in range(p.n_frames):
            fig = rasterize_frame(c.keypoints[f], p.width, p.height, p.skeleton, thickness,
                                  palette=CLASS_COLORS[lab])
            drawn = np.any(fig != 0, axis=0)
            out[f][:, drawn] = fig[:, drawn]
    return out


def make_sample(spec: SceneSpec, thickness=2.0) -> SceneSample:
    regions = region_masks(rasterize_all(spec.poses, thickness))
    return SceneSample(spec, render_scene(spec, thickness), regions.masks, regions.bboxes)


def gen_synthetic_dataset(seed: int, count: int, n_characters=2, canvas=64, frames=8) -> list[SceneSample]:
    """Deterministic list of rendered scenes for ``seed``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    return [make_sample(random_scene(rng, n_characters, canvas, frames)) for _ in range(count)]


def save_dataset(samples, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        d = root / f"sample_{i:04d}"
        d.mkdir(exist_ok=True)
        tensorio.write_tensor(s.frames, d / "frames.fymt")
        tensorio.write_tensor(s.masks, d / "masks.fymt")
        save_pose_json(s.spec.poses, d / "poses.json")
        (d / "caption.txt").write_text(s.spec.caption + "\n")
        (d / "labels.txt").write_text(" ".join(CLASS_NAMES[c] for c in s.spec.labels) + "\n")


def load_dataset(root) -> list[SceneSample]:
    out = []
    for d in sorted(Path(root).glob("sample_*")):
        poses = load_pose_json(d / "poses.json")
        labels = [CLASS_NAMES.index(w) for w in (d / "labels.txt").read_text().split()]
        spec = SceneSpec(labels, poses, (d / "caption.txt").read_text().strip())
        frames = tensorio.read_tensor(d / "frames.fymt")
        masks = tensorio.read_tensor(d / "masks.fymt")
        bboxes = region_masks(rasterize_all(poses)).bboxes
        out.append(SceneSample(spec, frames, masks, bboxes))
    return out


# metrics ----------------------------------------------------------------
def classify_pixels(frame) -> np.ndarray:
    """Nearest color template per pixel: 0 = background, k = class k - 1."""
    arr = np.asarray(frame, dtype=np.float32)
    templates = np.concatenate([BACKGROUND[None], CLASS_COLORS])
    d = ((arr[None] - templates[:, :, None, None]) ** 2).sum(axis=1)
    return np.argmin(d, axis=0)


def _bbox_of(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return EMPTY_BBOX
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def _despeckle(mask, min_neighbors=2):
    p = np.pad(mask.astype(np.int32), 1)
    h, w = mask.shape
    n = sum(p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0))
    return mask & (n >= min_neighbors)


def bbox_iou(a, b) -> float:
    """IoU of inclusive pixel boxes ``(row_min, row_max, col_min, col_max)``."""
    if a == EMPTY_BBOX or b == EMPTY_BBOX:
        return 0.0
    ih = min(a[1], b[1]) - max(a[0], b[0]) + 1
    iw = min(a[3], b[3]) - max(a[2], b[2]) + 1
    inter = max(ih, 0) * max(iw, 0)
    area = lambda r: (r[1] - r[0] + 1) * (r[3] - r[2] + 1)
    return inter / (area(a) + area(b) - inter)


def region_predictions(frames, bboxes):
    """Dominant foreground class inside each region, ``[frame][character]`` (None if no foreground)."""
    preds = []
    for f, frame in enumerate(frames):
        labels = classify_pixels(frame)
        row = []
        for box in bboxes[f]:
            if box == EMPTY_BBOX:
                row.append("empty")
                continue
            patch = labels[box[0]:box[1] + 1, box[2]:box[3] + 1]
            counts = np.bincount(patch.ravel(), minlength=len(CLASS_NAMES) + 1)[1:]
            row.append(int(np.argmax(counts)) if counts.sum() else None)
        preds.append(row)
    return preds


def region_class_accuracy(frames, bboxes, labels, per_character=False):
    """Fraction of (region, frame) pairs whose dominant color class matches ``labels``."""
    preds = region_predictions(frames, bboxes)
    hits = np.zeros(len(labels))
    total = np.zeros(len(labels))
    for row in preds:
        for i, p in enumerate(row):
            if p == "empty":
                log.warning("empty region for character %d excluded", i + 1)
                continue
            total[i] += 1
            hits[i] += p == labels[i]
    acc = float(hits.sum() / total.sum()) if total.sum() else float("nan")
    if per_character:
        return acc, [float(h / t) if t else float("nan") for h, t in zip(hits, total)]
    return acc


def _cosine(a, b):
    a = a.ravel().astype(np.float64)
    b = b.ravel().astype(np.float64)
    aa, bb = float(a @ a), float(b @ b)
    if aa == 0 or bb == 0:
        return None
    return float(np.clip((a @ b) / np.sqrt(aa * bb), -1.0, 1.0))


def _mean_consecutive_cosine(feats, weights=None):
    sims = []
    for f in range(len(feats) - 1):
        a, b = feats[f], feats[f + 1]
        if weights is not None:
            a, b = a * weights[f], b * weights[f + 1]
        c = _cosine(a, b)
        if c is None:
            log.warning("zero-norm feature at frames %d/%d excluded", f, f + 1)
            continue
        sims.append(c)
    return float(np.mean(sims)) if sims else float("nan")


def raw_features(frames, size=16):
    return resize(np.asarray(frames, dtype=np.float32), (size, size), mode="bilinear")


def frame_consistency(frames, masks=None, features=None, raw=False):
    """Mean cosine similarity of consecutive frames' features.

    ``features`` defaults to downsampled pixels (``raw=True`` forces them);
    pass precomputed model activations (``F x C x h x w``) otherwise.
    With ``masks`` (``F x N x H x W`` binary), also reports one value per
    character and one for the background complement.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.shape[0] < 2:
        raise ValueError("frame consistency needs at least 2 frames")
    feats = raw_features(frames) if (raw or features is None) else np.asarray(features, dtype=np.float32)
    out = {"overall": _mean_consecutive_cosine(feats)}
    if masks is not None:
        m = resize(np.asarray(masks, dtype=np.float32), feats.shape[-2:], mode="bilinear")
        for i in range(m.shape[1]):
            out[f"character_{i + 1}"] = _mean_consecutive_cosine(feats, m[:, i:i + 1])
        union = np.clip(np.asarray(masks, dtype=np.float32).max(axis=1, keepdims=True), 0, 1)
        bg = 1.0 - resize(union, feats.shape[-2:], mode="bilinear")
        out["background"] = _mean_consecutive_cosine(feats, bg)
    return out


def generated_bbox(frame, label) -> tuple:
    cls = classify_pixels(frame) == label + 1
    return _bbox_of(_despeckle(cls))


def pose_accuracy_iou(frames, poses: PoseTrackSet, labels, thickness=2.0):
    """Per character per frame: IoU of the class-colored pixel bbox vs the pose bbox.

    Returns an array shaped characters x frames; an undetected character
    scores 0.
    """
    frames = np.asarray(frames)
    if frames.shape[0] != poses.n_frames:
        raise ValueError(f"{frames.shape[0]} frames but poses have {poses.n_frames}")
    bboxes = region_masks(rasterize_all(poses, thickness)).bboxes
    ious = np.zeros((poses.n_characters, poses.n_frames))
    for f in range(poses.n_frames):
        for i, lab in enumerate(labels):
            ious[i, f] = bbox_iou(generated_bbox(frames[f], lab), bboxes[f][i])
    return ious


def text_alignment(frames, bboxes, split_prompts, table):
    """Cosine between the predicted class word's embedding and the region's prompt embedding."""
    preds = region_predictions(frames, bboxes)
    prompt_vecs = []
    for p in split_prompts:
        e = tokenize_embed(p, table)
        prompt_vecs.append(e.values[: e.count].mean(0).detach().numpy())
    scores = []
    for row in preds:
        for i, p in enumerate(row):
            if p == "empty":
                continue
            if p is None:
                scores.append(0.0)
                continue
            word = tokenize_embed(CLASS_NAMES[p], table).values[0].detach().numpy()
            scores.append(_cosine(word, prompt_vecs[i]) or 0.0)
    return float(np.mean(scores)) if scores else float("nan")


@dataclass
class MetricReport:
    region_class_accuracy: float
    frame_consistency: float
    pose_iou: float
    pose_iou_median: float
    text_alignment: float = float("nan")
    per_character: dict = field(default_factory=dict)
    background_consistency: float = float("nan")

    def items(self):
        yield "region_class_accuracy", self.region_class_accuracy
        yield "frame_consistency", self.frame_consistency
        yield "pose_iou", self.pose_iou
        yield "pose_iou_median", self.pose_iou_median
        yield "text_alignment", self.text_alignment
        yield "background_consistency", self.background_consistency
        for name, row in sorted(self.per_character.items()):
            for k, v in row.items():
                yield f"{name}.{k}", v

    def to_lines(self, label: str = "") -> str:
        head = f"[{label}]\n" if label else ""
        return head + "".join(f"{k:<32s} {v:.4f}\n" for k, v in self.items())

    def to_kv(self, prefix: str = "") -> str:
        return "".join(f"{prefix}{k}={v:.6f}\n" for k, v in self.items())


def evaluate(generated, samples, feature_fn=None, table=None) -> MetricReport:
    """Aggregate metrics over generated clips paired with their ground-truth samples."""
    accs, per_acc, ious, fcs = [], [], [], []
    fc_rows, talign = [], []
    for frames, s in zip(generated, samples):
        acc, per = region_class_accuracy(frames, s.bboxes, s.spec.labels, per_character=True)
        accs.append(acc)
        per_acc.append(per)
        ious.append(pose_accuracy_iou(frames, s.spec.poses, s.spec.labels))
        feats = feature_fn(frames) if feature_fn is not None else None
        fc = frame_consistency(frames, s.masks, features=feats)
        fc_rows.append(fc)
        if table is not None:
            split = split_prompt(parse_prompt(s.spec.caption), s.spec.n_characters)
            talign.append(text_alignment(frames, s.bboxes, split.ordered(), table))
    iou_all = np.concatenate([i.ravel() for i in ious])
    n_chars = max(s.spec.n_characters for s in samples)
    per_character = {}
    for i in range(n_chars):
        key = f"character_{i + 1}"
        per_character[key] = {
            "region_class_accuracy": float(np.nanmean([p[i] for p in per_acc if len(p) > i])),
            "pose_iou": float(np.mean([r[i].mean() for r in ious if r.shape[0] > i])),
            "frame_consistency": float(np.nanmean([fc[key] for fc in fc_rows if key in fc])),
        }
    return MetricReport(
        region_class_accuracy=float(np.nanmean(accs)),
        frame_consistency=float(np.nanmean([fc["overall"] for fc in fc_rows])),
        pose_iou=float(iou_all.mean()),
        pose_iou_median=float(np.median(iou_all)),
        text_alignment=float(np.mean(talign)) if talign else float("nan"),
        per_character=per_character,
        background_consistency=float(np.nanmean([fc["background"] for fc in fc_rows])),
    )
