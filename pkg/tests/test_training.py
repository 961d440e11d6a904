import numpy as np
import pytest
import torch

from multipose.bench import gen_synthetic_dataset
from multipose.diffusion import forward_diffuse
from multipose.errors import DivergenceError, UnknownCharacterError
from multipose.experiment import to_training_samples
from multipose.pipeline import ABLATIONS, Engine, TrainConfig, generate, save_frames, train
from multipose.tensorio import read_ppm

SMALL = (8, 8, 16, 16)


@pytest.fixture(scope="module")
def scenes():
    return gen_synthetic_dataset(7, 8, 1, 32, 1)


@pytest.fixture(scope="module")
def samples(scenes):
    return to_training_samples(scenes)


def probe_loss(engine, samples, seed=0):
    """Noise-prediction MSE on a fixed grid of timesteps and noise draws."""
    gen = torch.Generator().manual_seed(seed)
    total = []
    with torch.no_grad():
        for s in samples:
            x0 = torch.from_numpy(s.frames) * 2 - 1
            for t in (20, 100, 300, 600, 900):
                eps = torch.randn(x0.shape, generator=gen)
                x_t = forward_diffuse(x0, t, eps, engine.sched)
                pred = engine.predict_noise(x_t, torch.tensor([t]), [s.cond])
                total.append(torch.mean((pred - eps) ** 2).item())
    return float(np.mean(total))


def test_zero_lr_leaves_parameters_unchanged(samples):
    eng = Engine(seed=1, widths=SMALL)
    before = {k: v.clone() for k, v in eng.state_dict().items()}
    train(eng, samples, TrainConfig(seed=0, lr=0.0, batch=2, steps=5, log_every=0))
    assert all(torch.equal(before[k], v) for k, v in eng.state_dict().items())


def test_same_seed_same_curve(samples):
    curves = []
    for _ in range(2):
        eng = Engine(seed=2, widths=SMALL)
        curves.append(train(eng, samples, TrainConfig(seed=5, batch=2, steps=6, log_every=0)))
    assert curves[0] == curves[1]


def test_different_seed_different_curve(samples):
    a = train(Engine(seed=2, widths=SMALL), samples, TrainConfig(seed=5, batch=2, steps=3, log_every=0))
    b = train(Engine(seed=2, widths=SMALL), samples, TrainConfig(seed=6, batch=2, steps=3, log_every=0))
    assert a != b


def test_overfit_eight_samples(samples):
    eng = Engine(seed=0, widths=SMALL)
    initial = probe_loss(eng, samples)
    losses = train(eng, samples, TrainConfig(seed=0, lr=2e-3, batch=2, steps=650, log_every=0))
    final = probe_loss(eng, samples)
    assert len(losses) == 650
    assert final < 0.1 * initial, (initial, final)


def test_divergence_aborts(samples):
    with pytest.raises(DivergenceError, match="step 0"):
        train(Engine(seed=0, widths=SMALL), samples, TrainConfig(seed=0, batch=2, steps=3, divergence=1e-6))


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(Engine(seed=0, widths=SMALL), [], TrainConfig(steps=1))


def test_callback_sees_every_step(samples):
    seen = []
    train(Engine(seed=0, widths=SMALL), samples, TrainConfig(seed=0, batch=2, steps=4, log_every=0),
          callback=lambda step, loss: seen.append(step))
    assert seen == [0, 1, 2, 3]


@pytest.mark.parametrize("regime", sorted(ABLATIONS))
def test_training_under_each_regime(samples, regime):
    two = to_training_samples(gen_synthetic_dataset(3, 2, 2, 64, 2))
    losses = train(Engine(seed=0, widths=SMALL), two, TrainConfig(seed=0, batch=1, steps=2, log_every=0),
                   regime=ABLATIONS[regime])
    assert all(np.isfinite(losses))


@pytest.fixture(scope="module")
def engine():
    return Engine(seed=3, widths=SMALL)


class TestGenerate:
    def test_deterministic(self, engine, scenes):
        spec = scenes[0].spec
        a = generate(engine, spec.caption, spec.poses, steps=3, seed=9)
        b = generate(engine, spec.caption, spec.poses, steps=3, seed=9)
        assert a.tobytes() == b.tobytes()
        assert a.shape == (1, 3, 32, 32) and a.min() >= 0 and a.max() <= 1

    def test_identifier_free_single_character(self, engine, scenes):
        out = generate(engine, "a figure walking in the park", scenes[0].spec.poses, steps=2)
        assert np.isfinite(out).all()

    def test_unknown_character(self, engine, scenes):
        with pytest.raises(UnknownCharacterError):
            generate(engine, "red<1>, blue<2>", scenes[0].spec.poses, steps=2)

    def test_save_frames(self, engine, scenes, tmp_path):
        spec = scenes[0].spec
        frames = generate(engine, spec.caption, spec.poses, steps=2)
        paths = save_frames(frames, tmp_path)
        assert [p.name for p in paths] == ["frame_000.ppm"]
        np.testing.assert_allclose(read_ppm(paths[0]), frames[0], atol=0.5 / 255 + 1e-6)


def test_weights_round_trip(tmp_path, scenes):
    eng = Engine(seed=4, widths=SMALL)
    eng.save(tmp_path / "w.fymw")
    back = Engine.load(tmp_path / "w.fymw")
    assert back.widths == SMALL
    for (k, a), (_, b) in zip(eng.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    spec = scenes[0].spec
    assert (generate(eng, spec.caption, spec.poses, steps=2).tobytes()
            == generate(back, spec.caption, spec.poses, steps=2).tobytes())
