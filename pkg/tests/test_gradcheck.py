import numpy as np
import pytest
import torch

from multipose.bench import random_scene
from multipose.pipeline import ABLATIONS, Engine, SceneCondition, training_loss

SMALL = (8, 8, 16, 16)
STEP = 1e-5


def _setup(seed=0):
    torch.manual_seed(seed)
    eng = Engine(seed=seed, widths=SMALL).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in eng.parameters():
            # zero-initialized taps and output projections would hide the control path
            if not p.any():
                p.copy_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    spec = random_scene(np.random.default_rng(seed), 2, frames=2)
    cond = SceneCondition.build(spec.caption, spec.poses)
    x0 = torch.rand(2, 3, 64, 64, generator=gen, dtype=torch.float64) * 2 - 1
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    t = torch.tensor([317])
    return eng, lambda: training_loss(eng, x0, t, eps, [cond])


def _checked_entries(eng, count, seed):
    named = [(n, p) for n, p in eng.named_parameters() if n.startswith("control.") or "_attn." in n]
    rng = np.random.default_rng(seed)
    picks = []
    for _ in range(count):
        name, p = named[rng.integers(len(named))]
        picks.append((name, p, int(rng.integers(p.numel()))))
    return picks


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_central_differences(seed):
    eng, loss_fn = _setup(seed)
    eng.zero_grad()
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for name, p, idx in _checked_entries(eng, 25, seed):
            flat = p.view(-1)
            analytic = p.grad.view(-1)[idx].item()
            orig = flat[idx].item()
            flat[idx] = orig + STEP
            up = loss_fn().item()
            flat[idx] = orig - STEP
            down = loss_fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * STEP)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
            assert rel < 1e-3, (name, idx, analytic, numeric)
    print(f"worst relative error {worst:.2e}")


def test_checked_parameters_cover_both_mechanisms():
    eng, _ = _setup()
    names = {n for n, _, _ in _checked_entries(eng, 25, 0)}
    assert any(n.startswith("control.") for n in names) and any("_attn." in n for n in names)


def test_every_regime_backpropagates_to_control():
    for name, regime in ABLATIONS.items():
        eng, _ = _setup()
        spec = random_scene(np.random.default_rng(5), 2, frames=2)
        cond = SceneCondition.build(spec.caption, spec.poses)
        x0 = torch.zeros(2, 3, 64, 64, dtype=torch.float64)
        loss = training_loss(eng, x0, torch.tensor([10]), torch.ones_like(x0), [cond], regime)
        loss.backward()
        assert any(p.grad is not None and p.grad.abs().sum() > 0
                   for n, p in eng.named_parameters() if n.startswith("control.")), name
