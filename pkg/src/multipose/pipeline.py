"""End-to-end engine: conditioning, control fusion, training and generation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import tensorio
from .blocks import WIDTHS
from .control import ControlEncoder, ControlResiduals, fuse_control_residuals
from .diffusion import AttnCondition, Denoiser, NoiseSchedule, ddim_sample, forward_diffuse
from .errors import DivergenceError, GeometryError
from .masks import MaskPyramid, mask_flow
from .poses import DEFAULT_THICKNESS, PoseTrackSet, composite, rasterize_all
from .prompts import DEFAULT_VOCAB, EmbeddingTable, parse_prompt, split_prompt

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Regime:
    """Which multi-character mechanisms are active at inference.

    ``control``: ``multi`` (one branch per character), ``single`` (one
    branch on the composite pose and full prompt) or ``none``.
    ``first_branch``: in ``first-unmasked`` fusion, ``composite`` prepends an
    unmasked branch fed the full prompt and all poses; ``character`` leaves
    character 1's branch unmasked instead.
    """
    spatial_attn: bool = True
    control: str = "multi"
    fusion_mode: str = "first-unmasked"
    first_branch: str = "composite"
    sharpness: float = 1.0

    def __post_init__(self):
        if self.control not in ("multi", "single", "none"):
            raise ValueError(f"unknown control mode {self.control!r}")
        if self.fusion_mode not in ("first-unmasked", "eq3"):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.first_branch not in ("composite", "character"):
            raise ValueError(f"unknown first-branch source {self.first_branch!r}")
        if self.sharpness < 1:
            raise ValueError(f"mask sharpness must be >= 1, got {self.sharpness}")


FULL = Regime()
ABLATIONS = {
    "full": FULL,
    "no-spatial-attn": Regime(spatial_attn=False),
    "single-branch": Regime(control="single"),
    "eq3-all-masked": Regime(fusion_mode="eq3"),
}


def _with_full_region(pyr: MaskPyramid) -> MaskPyramid:
    """Prepend an all-ones region (for an unmasked leading branch)."""
    return MaskPyramid([np.concatenate([np.ones_like(l[:, :1]), l], axis=1) for l in pyr.levels])


@dataclass
class SceneCondition:
    """Everything derived from one (prompt, poses) pair before denoising."""
    split: object
    pose_maps: np.ndarray  # characters x frames x 3 x H x W
    composite: np.ndarray  # frames x 3 x H x W
    pyramid: MaskPyramid
    bboxes: list = field(default_factory=list)

    @property
    def n_characters(self) -> int:
        return self.pose_maps.shape[0]

    @property
    def frames(self) -> int:
        return self.pose_maps.shape[1]

    @property
    def size(self):
        return self.pose_maps.shape[-2:]

    @classmethod
    def build(cls, prompt: str, poses: PoseTrackSet, sharpness: float = 1.0,
              thickness: float = DEFAULT_THICKNESS, pose_maps=None) -> "SceneCondition":
        if poses.width % 8 or poses.height % 8:
            raise GeometryError(f"canvas {poses.width}x{poses.height} must be divisible by 8")
        split = split_prompt(parse_prompt(prompt), poses.n_characters)
        if pose_maps is None:
            pose_maps = rasterize_all(poses, thickness)
        regions, pyr = mask_flow(pose_maps, sharpness)
        return cls(split, pose_maps, composite(pose_maps), pyr, regions.bboxes)

    def window(self, start: int, length: int) -> "SceneCondition":
        sl = slice(start, start + length)
        return SceneCondition(
            self.split, self.pose_maps[:, sl], self.composite[sl],
            MaskPyramid([l[sl] for l in self.pyramid.levels]), self.bboxes[sl],
        )


class Engine(nn.Module):
    """Text table, denoiser and shared control encoder as one weight set."""

    def __init__(self, vocab=DEFAULT_VOCAB, seed: int = 0, widths=WIDTHS):
        super().__init__()
        self.widths = tuple(widths)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.text = EmbeddingTable(vocab)
            self.denoiser = Denoiser(widths=self.widths)
            self.control = ControlEncoder(widths=self.widths)
        self.sched = NoiseSchedule()

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # conditioning -------------------------------------------------------
    def _branches(self, cond: SceneCondition, regime: Regime):
        """(pose maps, embedding) per control branch plus the fusion pyramid."""
        chars = [(cond.pose_maps[i], self.text(p)) for i, p in enumerate(cond.split.ordered())]
        full = (cond.composite, self.text(cond.split.full))
        if regime.control == "single":
            return [full], None
        if regime.fusion_mode == "first-unmasked" and regime.first_branch == "composite":
            return [full] + chars, _with_full_region(cond.pyramid)
        return chars, cond.pyramid

    def control_residuals(self, x_t, t_rows, conds, regime: Regime):
        if regime.control == "none":
            return None
        frames = conds[0].frames
        plans = [self._branches(c, regime) for c in conds]
        xs, poses, embs, ts = [], [], [], []
        for s, (branches, _) in enumerate(plans):
            rows = slice(s * frames, (s + 1) * frames)
            for pose, emb in branches:
                xs.append(x_t[rows])
                poses.append(torch.from_numpy(np.ascontiguousarray(pose)).to(x_t.dtype))
                embs.append(emb)
                ts.append(t_rows[rows])
        res = self.control(torch.cat(xs), torch.cat(poses), torch.cat(ts), embs, frames)
        fused, k = [], 0
        for branches, pyr in plans:
            mine = [res.chunk((k + i) * frames, (k + i + 1) * frames) for i in range(len(branches))]
            k += len(branches)
            fused.append(mine[0] if pyr is None else fuse_control_residuals(mine, pyr, regime.fusion_mode))
        return ControlResiduals.cat(fused)

    def attn_conditions(self, conds, regime: Regime):
        out = []
        for c in conds:
            if regime.spatial_attn:
                embs = [self.text(p) for p in c.split.ordered()]
                out.append(AttnCondition(embs, c.pyramid, c.frames))
            else:
                out.append(AttnCondition([self.text(c.split.full)], None, c.frames))
        return out

    def predict_noise(self, x_t, t, conds, regime: Regime = FULL, capture=None):
        """``x_t`` stacks every scene's frames; ``t`` is one step per scene or per row."""
        frames = conds[0].frames
        t = torch.as_tensor(t).reshape(-1)
        t_rows = t.repeat_interleave(frames) if t.numel() == len(conds) else t.expand(x_t.shape[0])
        control = self.control_residuals(x_t, t_rows, conds, regime)
        return self.denoiser(x_t, t_rows, self.attn_conditions(conds, regime), control, capture=capture)

    def features(self, frames_img, prompt: str = "on gray background"):
        """Per-frame bottleneck activations of clean frames (``F x 3 x H x W`` in [0, 1])."""
        x = torch.as_tensor(frames_img, dtype=torch.float32) * 2 - 1
        emb = self.text(prompt)
        # one condition per frame keeps frames independent
        conds = [AttnCondition([emb], None, 1) for _ in range(x.shape[0])]
        with torch.no_grad():
            return self.denoiser(x, torch.zeros(x.shape[0], dtype=torch.long), conds, return_bottleneck=True)

    # weights ------------------------------------------------------------
    def state_arrays(self) -> dict:
        out = {}
        for name, t in self.state_dict().items():
            out[name] = t.detach().cpu().numpy()
        return out

    def save(self, path) -> None:
        tensorio.write_weights(self.state_arrays(), path)

    @classmethod
    def load(cls, path) -> "Engine":
        arrays = tensorio.read_weights(path)
        widths = tuple(int(arrays[f"denoiser.down_blocks.{2 * l}.conv.weight"].shape[0]) for l in range(4))
        eng = cls(widths=widths)
        state = {k: torch.from_numpy(v) for k, v in arrays.items()}
        eng.load_state_dict(state)
        return eng


# training ---------------------------------------------------------------
@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-3
    batch: int = 4
    steps: int = 1000
    clip_len: int = 2
    grad_clip: float = 1.0
    log_every: int = 50
    divergence: float = 1e3
    ema: float = 0.999  # weight averaging decay; 0 keeps the raw final weights
    final_lr_frac: float = 0.1  # cosine decay from lr down to lr * final_lr_frac


@dataclass
class Sample:
    frames: np.ndarray  # F x 3 x H x W in [0, 1]
    cond: SceneCondition


def training_loss(engine: Engine, x0, t, eps, conds, regime: Regime = FULL):
    """Noise-prediction MSE for clean clips ``x0`` noised to per-scene steps ``t``."""
    t_rows = t.repeat_interleave(conds[0].frames)
    x_t = forward_diffuse(x0, t_rows, eps, engine.sched)
    return torch.mean((engine.predict_noise(x_t, t, conds, regime) - eps) ** 2)


def train(engine: Engine, samples, config: TrainConfig, regime: Regime = FULL, callback=None):
    """Adam on the noise-prediction MSE; returns the per-step loss curve.

    Deterministic given ``config.seed``: scene order, clip windows, timesteps
    and noise all come from seeded generators. With ``config.ema`` the engine
    ends up holding the moving average of the weights, not the last iterate:
    single Adam steps at this scale can move the loss a lot, and the average
    is what gets sampled from.
    """
    if not samples:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    params = list(engine.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    ema = [p.detach().clone() for p in params] if config.ema else None
    frames_total = samples[0].frames.shape[0]
    clip = min(config.clip_len, frames_total)
    losses = []
    order = rng.permutation(len(samples))
    pos = 0
    t0 = time.time()
    for step in range(config.steps):
        batch = []
        for _ in range(config.batch):
            if pos == len(order):
                order, pos = rng.permutation(len(samples)), 0
            batch.append(samples[order[pos]])
            pos += 1
        starts = rng.integers(0, frames_total - clip + 1, size=len(batch))
        x0 = torch.cat([torch.from_numpy(s.frames[a:a + clip]) for s, a in zip(batch, starts)]) * 2 - 1
        conds = [s.cond.window(int(a), clip) for s, a in zip(batch, starts)]
        t = torch.from_numpy(rng.integers(0, engine.sched.T, size=len(batch)))
        eps = torch.randn(x0.shape, generator=gen)
        loss = training_loss(engine, x0, t, eps, conds, regime)
        value = loss.item()
        if not math.isfinite(value) or value > config.divergence:
            raise DivergenceError(
                f"loss {value:.4g} at step {step} exceeds {config.divergence:g}; "
                f"recent losses {losses[-5:]}, lr {config.lr}"
            )
        opt.zero_grad()
        loss.backward()
        if config.grad_clip:
            nn.utils.clip_grad_norm_(params, config.grad_clip)
        progress = step / max(config.steps - 1, 1)
        cosine = 0.5 * (1 + math.cos(math.pi * progress))
        for group in opt.param_groups:
            group["lr"] = config.lr * (config.final_lr_frac + (1 - config.final_lr_frac) * cosine)
        opt.step()
        if ema is not None:
            # short effective window early on so the average is not dominated by the initialization
            decay = min(config.ema, (1 + step) / (10 + step))
            with torch.no_grad():
                for avg, p in zip(ema, params):
                    avg.lerp_(p, 1 - decay)
        losses.append(value)
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = np.mean(losses[-config.log_every:])
            log.info("step %d/%d loss %.4f (%.0fs)", step + 1, config.steps, recent, time.time() - t0)
        if callback is not None:
            callback(step, value)
    if ema is not None:
        with torch.no_grad():
            for avg, p in zip(ema, params):
                p.copy_(avg)
    return losses


# generation -------------------------------------------------------------
def generate(engine: Engine, prompt: str, poses: PoseTrackSet, steps: int = 50, seed: int = 0,
             regime: Regime = FULL, cond: SceneCondition | None = None):
    """Sample a clip for ``poses``; returns ``frames x 3 x H x W`` in [0, 1]."""
    if cond is None:
        cond = SceneCondition.build(prompt, poses, regime.sharpness)
    gen = torch.Generator().manual_seed(seed)
    shape = (cond.frames, 3) + tuple(cond.size)
    engine.eval()

    def eps_fn(x, t):
        return engine.predict_noise(x, torch.tensor([t]), [cond], regime)

    x = ddim_sample(eps_fn, shape, engine.sched, steps=steps, generator=gen)
    return ((x + 1) / 2).clamp(0, 1).numpy()


def save_frames(frames, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, fr in enumerate(frames):
        p = out_dir / f"frame_{i:03d}.ppm"
        tensorio.write_ppm(fr, p)
        paths.append(p)
    return paths
