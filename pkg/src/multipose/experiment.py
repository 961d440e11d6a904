"""Train the toy model on synthetic scenes and compare inference regimes."""
from __future__ import annotations

import logging
import time

import numpy as np
import torch

from .bench import MetricReport, SceneSample, evaluate, gen_synthetic_dataset
from .pipeline import ABLATIONS, Engine, Regime, Sample, SceneCondition, TrainConfig, generate, train

log = logging.getLogger(__name__)

TRAIN_SEED = 1234
EVAL_SEED = 98765


def to_training_samples(scenes: list[SceneSample], sharpness: float = 1.0) -> list[Sample]:
    return [Sample(s.frames, SceneCondition.build(s.spec.caption, s.spec.poses, sharpness)) for s in scenes]


def train_toy_model(n_train=512, steps=1200, seed=0, batch=4, clip_len=2, lr=1e-3,
                    data_seed=TRAIN_SEED, callback=None):
    """Fresh engine trained on ``n_train`` two-character scenes; returns (engine, losses)."""
    scenes = gen_synthetic_dataset(data_seed, n_train)
    engine = Engine(seed=seed)
    log.info("engine has %d parameters", engine.n_parameters())
    cfg = TrainConfig(seed=seed, lr=lr, batch=batch, steps=steps, clip_len=clip_len)
    t0 = time.time()
    losses = train(engine, to_training_samples(scenes), cfg, callback=callback)
    log.info("trained %d steps in %.0fs", steps, time.time() - t0)
    return engine, losses


def generate_for(engine: Engine, scenes, regime: Regime, ddim_steps=20, seed=0):
    out = []
    for k, s in enumerate(scenes):
        cond = SceneCondition.build(s.spec.caption, s.spec.poses, regime.sharpness)
        out.append(generate(engine, s.spec.caption, s.spec.poses, ddim_steps, seed + k, regime, cond=cond))
    return out


def ablation_study(engine: Engine, scenes, regimes=None, ddim_steps=20, seed=0) -> dict[str, MetricReport]:
    """Generate every scene under each regime and score it."""
    regimes = ABLATIONS if regimes is None else regimes
    reports = {}
    feature_fn = lambda frames: engine.features(frames).numpy()
    for name, regime in regimes.items():
        t0 = time.time()
        with torch.no_grad():
            frames = generate_for(engine, scenes, regime, ddim_steps, seed)
        reports[name] = evaluate(frames, scenes, feature_fn=feature_fn, table=engine.text)
        log.info("%s: acc %.3f iou-median %.3f (%.0fs)", name, reports[name].region_class_accuracy,
                 reports[name].pose_iou_median, time.time() - t0)
    return reports


def held_out_scenes(count=32, seed=EVAL_SEED):
    return gen_synthetic_dataset(seed, count)
