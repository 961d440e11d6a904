"""Command-line entry point: ``python -m multipose <subcommand> ...``.

Exit codes: 0 success, 2 missing input, 3 validation error, 4 numeric
divergence. Every subcommand stages its output in a temporary sibling
directory and renames it into place, so a failed run leaves nothing behind.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import __version__, tensorio
from .bench import evaluate, gen_synthetic_dataset, load_dataset, save_dataset
from .diffusion import forward_diffuse
from .errors import DivergenceError, MultiPoseError
from .experiment import EVAL_SEED, ablation_study, held_out_scenes, to_training_samples
from .masks import mask_flow
from .pipeline import ABLATIONS, Engine, Regime, SceneCondition, TrainConfig, generate, save_frames, train
from .poses import load_pose_json, rasterize_all

log = logging.getLogger("multipose")

EXIT_OK, EXIT_MISSING, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3, 4
MASK_TOL = 1e-5


class OutputExistsError(MultiPoseError):
    pass


# helpers ----------------------------------------------------------------
@contextlib.contextmanager
def staged_output(target, overwrite=False):
    """Yield a temp dir next to ``target``; move it into place on success."""
    target = Path(target)
    if target.exists() and (not target.is_dir() or any(target.iterdir())) and not overwrite:
        raise OutputExistsError(f"output {target} exists and is not empty (use --overwrite)")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target) if target.is_dir() else target.unlink()
    os.replace(tmp, target)


def write_manifest(path, command, args, files=()):
    """``key=value`` lines: command, version, every argument, then the files written."""
    lines = [f"command={command}", f"version={__version__}"]
    for k, v in sorted(vars(args).items()):
        if k in ("func", "overwrite", "verbose"):
            continue
        lines.append(f"{k}={'' if v is None else v}")
    lines.append("files=" + ",".join(sorted(files)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        k, _, v = line.partition("=")
        out[k] = v
    return out


def _require(path, what):
    if path is None:
        raise FileNotFoundError(f"missing required {what}")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _regime(args) -> Regime:
    return Regime(
        spatial_attn=not args.no_spatial_attn,
        control="single" if args.single_branch else "multi",
        fusion_mode=args.fusion_mode,
        first_branch=args.first_branch,
        sharpness=args.mask_sharpness,
    )


def _load_poses(args):
    poses = load_pose_json(_require(args.poses, "pose file"))
    if args.frames is not None:
        if not 1 <= args.frames <= poses.n_frames:
            raise ValueError(f"--frames must be in [1, {poses.n_frames}], got {args.frames}")
        for c in poses.characters:
            c.keypoints = c.keypoints[: args.frames]
    return poses


def _load_engine(args) -> Engine:
    return Engine.load(_require(args.weights, "weights file"))


def heatmap(values) -> np.ndarray:
    """Map an ``H x W`` array to a 3-channel black-red-yellow-white ramp."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    v = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    return np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)])


def _files(root):
    return [str(p.relative_to(root)) for p in Path(root).rglob("*") if p.is_file()]


# subcommands ------------------------------------------------------------
def cmd_gen_data(args):
    scenes = gen_synthetic_dataset(args.seed, args.count, args.characters, args.canvas, args.frames)
    with staged_output(args.output, args.overwrite) as out:
        save_dataset(scenes, out)
        write_manifest(out / "manifest.txt", "gen-data", args, _files(out))
    print(f"wrote {len(scenes)} scenes to {args.output}")


def cmd_train(args):
    if args.data is not None:
        scenes = load_dataset(_require(args.data, "dataset directory"))
        if not scenes:
            raise ValueError(f"no samples found in {args.data}")
    else:
        scenes = gen_synthetic_dataset(args.data_seed, args.count)
    regime = _regime(args)
    samples = to_training_samples(scenes, regime.sharpness)
    cfg = TrainConfig(seed=args.seed, lr=args.lr, batch=args.batch, steps=args.steps, clip_len=args.clip_len)
    engine = Engine(seed=args.seed)
    with staged_output(args.output, args.overwrite) as out:
        losses = train(engine, samples, cfg, regime)
        engine.save(out / "weights.fymw")
        (out / "losses.txt").write_text("".join(f"{v:.6f}\n" for v in losses))
        write_manifest(out / "manifest.txt", "train", args, _files(out))
    print(f"trained {args.steps} steps, final loss {losses[-1]:.4f}; weights in {args.output}/weights.fymw")


def cmd_generate(args):
    poses = _load_poses(args)
    engine = _load_engine(args)
    regime = _regime(args)
    cond = SceneCondition.build(args.prompt, poses, regime.sharpness)
    with staged_output(args.output, args.overwrite) as out:
        frames = generate(engine, args.prompt, poses, args.steps, args.seed, regime, cond=cond)
        save_frames(frames, out)
        tensorio.write_tensor(frames.astype(np.float32), out / "frames.fymt")
        write_manifest(out / "manifest.txt", "generate", args, _files(out))
    print(f"wrote {len(frames)} frames to {args.output}")


def cmd_masks(args):
    poses = _load_poses(args)
    regions, pyr = mask_flow(rasterize_all(poses), args.mask_sharpness)
    with staged_output(args.output, args.overwrite) as out:
        tensorio.write_tensor(regions.masks.astype(np.float32), out / "bbox_masks.fymt")
        for group in ("a", "b", "c"):
            for k, level in enumerate(getattr(pyr, f"group_{group}")):
                for f in range(level.shape[0]):
                    for i in range(level.shape[1]):
                        stem = f"f{f:03d}_c{i + 1}_{group}{k}"
                        tensorio.write_tensor(level[f, i].astype(np.float32), out / f"{stem}.fymt")
                        tensorio.write_ppm(level[f, i], out / f"{stem}.ppm")
        write_manifest(out / "manifest.txt", "masks", args, _files(out))
        dev = check_mask_dir(out)
    print(f"wrote {pyr.n_characters} characters x {poses.n_frames} frames of mask pyramids; "
          f"max partition deviation {dev:.2e}")


def check_mask_dir(root, tol=MASK_TOL) -> float:
    """Recompute per-pixel sums of every exported level; raise if any exceeds ``tol``."""
    root = Path(root)
    sums = {}
    for p in sorted(root.glob("f*_c*_*.fymt")):
        frame, _, level = p.stem.split("_")
        arr = tensorio.read_tensor(p).astype(np.float64)
        key = (frame, level)
        sums[key] = sums.get(key, 0.0) + arr
    if not sums:
        raise FileNotFoundError(f"no mask tensors in {root}")
    dev = max(float(np.abs(s - 1.0).max()) for s in sums.values())
    if dev > tol:
        raise MultiPoseError(f"mask partition violated: max deviation {dev:.3g} > {tol}")
    return dev


def cmd_check_masks(args):
    dev = check_mask_dir(_require(args.directory, "mask directory"))
    print(f"ok: max partition deviation {dev:.2e}")


def cmd_inspect(args):
    poses = _load_poses(args)
    engine = _load_engine(args)
    regime = _regime(args)
    cond = SceneCondition.build(args.prompt, poses, regime.sharpness)
    frames = generate(engine, args.prompt, poses, args.steps, args.seed, regime, cond=cond)
    x0 = torch.from_numpy(frames) * 2 - 1
    eps = torch.randn(x0.shape, generator=torch.Generator().manual_seed(args.seed))
    t = torch.tensor([args.timestep])
    x_t = forward_diffuse(x0, t, eps, engine.sched)
    captured = []
    with torch.no_grad():
        engine.predict_noise(x_t, t, [cond], regime, capture=captured)
    if not captured:
        raise ValueError("no region-masked attention layers ran (is --no-spatial-attn set?)")
    with staged_output(args.output, args.overwrite) as out:
        save_frames(frames, out / "frames")
        for tag, branches, masks in captured:
            if tag != args.layer:
                continue
            for b, feat in enumerate(branches):
                norms = feat.norm(dim=1).numpy()
                for f in range(norms.shape[0]):
                    tensorio.write_ppm(heatmap(norms[f]), out / f"{tag}_branch{b + 1}_f{f:03d}.ppm")
                    weighted = norms[f] * np.asarray(masks[f, b])
                    tensorio.write_ppm(heatmap(weighted), out / f"{tag}_branch{b + 1}_f{f:03d}_masked.ppm")
        write_manifest(out / "manifest.txt", "inspect", args, _files(out))
    print(f"wrote per-branch heatmaps for layer {args.layer} to {args.output}")


def cmd_ablate(args):
    engine = _load_engine(args)
    scenes = held_out_scenes(args.count, args.eval_seed)
    regimes = {k: Regime(r.spatial_attn, r.control, r.fusion_mode, r.first_branch, args.mask_sharpness)
               for k, r in ABLATIONS.items()}
    reports = ablation_study(engine, scenes, regimes, args.steps, args.seed)
    with staged_output(args.output, args.overwrite) as out:
        (out / "report.txt").write_text("\n".join(r.to_lines(k) for k, r in reports.items()))
        (out / "report.kv").write_text("".join(r.to_kv(f"{k}.") for k, r in reports.items()))
        write_manifest(out / "manifest.txt", "ablate", args, _files(out))
    print((Path(args.output) / "report.txt").read_text())


def _load_generated(root, n):
    out = []
    for i in range(n):
        d = Path(root) / f"sample_{i:04d}"
        if (d / "frames.fymt").exists():
            out.append(tensorio.read_tensor(d / "frames.fymt"))
        else:
            ppms = sorted(d.glob("frame_*.ppm"))
            if not ppms:
                raise FileNotFoundError(f"no frames for sample {i} in {d}")
            out.append(np.stack([tensorio.read_ppm(p) for p in ppms]))
    return out


def cmd_eval(args):
    samples = load_dataset(_require(args.data, "dataset directory"))
    if not samples:
        raise ValueError(f"no samples found in {args.data}")
    if args.generated is not None:
        generated = _load_generated(_require(args.generated, "generated directory"), len(samples))
    else:
        generated = [s.frames for s in samples]
    feature_fn, table = None, None
    if args.weights is not None:
        engine = _load_engine(args)
        feature_fn = lambda frames: engine.features(frames).numpy()
        table = engine.text
    report = evaluate(generated, samples, feature_fn=feature_fn, table=table)
    with staged_output(args.output, args.overwrite) as out:
        (out / "report.txt").write_text(report.to_lines("eval"))
        (out / "report.kv").write_text(report.to_kv())
        write_manifest(out / "manifest.txt", "eval", args, _files(out))
    print(report.to_lines("eval"))


# parser -----------------------------------------------------------------
def _add_common(p, output=True):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    if output:
        p.add_argument("-o", "--output", required=True, help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace an existing non-empty output directory")


def _add_regime(p):
    p.add_argument("--no-spatial-attn", action="store_true", help="plain cross-attention on the full prompt")
    p.add_argument("--single-branch", action="store_true", help="one control branch on the merged pose and prompt")
    p.add_argument("--fusion-mode", choices=("first-unmasked", "eq3"), default="first-unmasked",
                   help="control fusion: leading branch unmasked (default) or every branch masked")
    p.add_argument("--first-branch", choices=("composite", "character"), default="composite",
                   help="what feeds the unmasked leading branch in first-unmasked fusion")
    p.add_argument("--mask-sharpness", type=float, default=1.0, help="softmax sharpness s >= 1 (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multipose", description="Multi-character pose-guided video generation on a toy diffusion model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic multi-character dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--characters", type=int, default=2, choices=(1, 2, 3))
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--frames", type=int, default=8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy model")
    _add_common(p)
    _add_regime(p)
    p.add_argument("--data", help="dataset directory from gen-data (default: synthesize --count scenes)")
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--data-seed", type=int, default=1234)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--clip-len", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("generate", cmd_generate, "sample frames for a prompt and pose file"),
                                 ("inspect", cmd_inspect, "dump per-branch attention heatmaps")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_regime(p)
        p.add_argument("--poses", help="pose-track JSON file")
        p.add_argument("--prompt", required=True, help='e.g. "red<1>, blue<2>, on gray background"')
        p.add_argument("--weights", help="FYMW weights file")
        p.add_argument("--frames", type=int, help="use only the first N frames")
        p.add_argument("--steps", type=int, default=50, help="DDIM steps (default 50)")
        if name == "inspect":
            p.add_argument("--timestep", type=int, default=400)
            p.add_argument("--layer", default="down0", choices=("down0", "down1", "down2", "up2", "up1", "up0"))
        p.set_defaults(func=func)

    p = sub.add_parser("masks", help="export the normalized mask pyramid of a pose file")
    _add_common(p)
    p.add_argument("--poses", help="pose-track JSON file")
    p.add_argument("--frames", type=int, help="use only the first N frames")
    p.add_argument("--mask-sharpness", type=float, default=1.0)
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("check-masks", help="verify an exported mask directory sums to one per pixel")
    p.add_argument("directory")
    p.set_defaults(func=cmd_check_masks)

    p = sub.add_parser("ablate", help="compare the four inference regimes on held-out scenes")
    _add_common(p)
    p.add_argument("--weights", help="FYMW weights file")
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--eval-seed", type=int, default=EVAL_SEED)
    p.add_argument("--steps", type=int, default=20, help="DDIM steps (default 20)")
    p.add_argument("--mask-sharpness", type=float, default=1.0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score frames against a ground-truth dataset")
    _add_common(p)
    p.add_argument("--data", help="ground-truth dataset directory")
    p.add_argument("--generated", help="directory of sample_XXXX/ frames (default: the ground truth itself)")
    p.add_argument("--weights", help="weights for feature-space consistency (default: raw pixels)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    threads = os.environ.get("FYM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    if getattr(args, "mask_sharpness", 1.0) < 1:
        print(f"error: --mask-sharpness must be >= 1, got {args.mask_sharpness}", file=sys.stderr)
        return EXIT_INVALID
    try:
        args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MultiPoseError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK
