import json

import numpy as np
import pytest

from nlrn import checkpoint as ckpt
from nlrn.datasets import make_synthetic_images
from nlrn.model import NlrnConfig
from nlrn.training import (
    AdamState,
    TrainConfig,
    adam_step,
    clip_gradients,
    global_norm,
    lr_at,
    sample_batch,
    split_config,
    train,
)
from nlrn.validation import NumericalError

TINY = NlrnConfig(channels=4, embed=2, neighborhood=3, unroll=2)


def tiny_cfg(**kw):
    base = dict(steps=6, batch_size=4, patch_size=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return make_synthetic_images(4, 16, 0)


# sampling


def test_sigma_zero_gives_clean_input(corpus):
    clean, degraded = sample_batch(corpus, tiny_cfg(sigma=0.0), np.random.default_rng(0), 8)
    np.testing.assert_array_equal(clean, degraded)
    assert clean.shape == (4, 8, 8)


def test_sampling_is_deterministic(corpus):
    a = sample_batch(corpus, tiny_cfg(), np.random.default_rng(5), 8)
    b = sample_batch(corpus, tiny_cfg(), np.random.default_rng(5), 8)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_noise_standard_deviation():
    corpus = np.full((1, 40, 40), 0.5)
    cfg = TrainConfig(batch_size=625, sigma=25.0, scales=(1.0,))
    clean, degraded = sample_batch(corpus, cfg, np.random.default_rng(1), 40)
    resid = degraded - clean
    assert resid.size == 10**6
    assert abs(resid.std() / (25 / 255) - 1) <= 0.01


def test_sr_degradation(corpus):
    cfg = tiny_cfg(task="sr", factors=(2,))
    clean, degraded = sample_batch(corpus, cfg, np.random.default_rng(2), 8)
    assert degraded.shape == clean.shape
    assert not np.allclose(clean, degraded)


def test_sampling_errors(corpus):
    with pytest.raises(ValueError, match="larger"):
        sample_batch(corpus, tiny_cfg(), np.random.default_rng(0), 17)
    with pytest.raises(ValueError):
        sample_batch([], tiny_cfg(), np.random.default_rng(0), 8)


# optimizer


def test_adam_zero_gradient():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState(m={"w": np.array([0.5, 0.5])}, v={"w": np.array([1.0, 1.0])})
    adam_step(params, {"w": np.zeros(2)}, state, 0.0)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    np.testing.assert_allclose(state.m["w"], [0.45, 0.45])
    np.testing.assert_allclose(state.v["w"], [0.999, 0.999])


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-4])
def test_adam_first_step_is_sign(g):
    params = {"w": np.array([0.0])}
    adam_step(params, {"w": np.array([g])}, AdamState(), 0.01)
    update = params["w"][0]
    assert abs(update + 0.01 * g / (abs(g) + 1e-8)) <= 1e-9


def test_adam_quadratic_converges():
    params = {"w": np.array([1.0])}
    state = AdamState()
    for _ in range(100):
        adam_step(params, {"w": params["w"].copy()}, state, 0.1)
    assert abs(params["w"][0]) < 0.1


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(4)
    w = rng.normal(size=5)
    params = {"w": w.copy()}
    state = AdamState()
    m = v = np.zeros(5)
    for t in range(1, 8):
        g = rng.normal(size=5)
        adam_step(params, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], w, atol=1e-14)


def test_adam_shape_errors():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)
    with pytest.raises(KeyError):
        adam_step({"w": np.zeros(2)}, {"u": np.zeros(2)}, AdamState(), 0.1)


# clipping


def test_clip_small_norm_unchanged():
    g = {"a": np.array([0.3, 0.0])}
    out, norm = clip_gradients(g, 0.5)
    np.testing.assert_array_equal(out["a"], [0.3, 0.0])
    assert norm == pytest.approx(0.3)


def test_clip_example():
    out, norm = clip_gradients({"a": np.array([3.0, 4.0])}, 0.5)
    np.testing.assert_allclose(out["a"], [0.3, 0.4], atol=1e-15)
    assert norm == 5.0


def test_clip_is_global():
    out, _ = clip_gradients({"a": np.array([3.0]), "b": np.array([4.0])}, 0.5)
    np.testing.assert_allclose([out["a"][0], out["b"][0]], [0.3, 0.4])


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e6])
def test_clip_bound(scale):
    g = {k: np.random.default_rng(i).normal(size=(7, 3)) * scale for i, k in enumerate("abc")}
    out, _ = clip_gradients(g, 0.5)
    assert global_norm(out) <= 0.5 + 1e-9


def test_clip_rejects_nan():
    with pytest.raises(NumericalError, match="b"):
        clip_gradients({"a": np.ones(2), "b": np.array([np.nan])})


# schedule


def test_lr_schedule_six_values():
    cfg = TrainConfig(steps=600)
    values = [lr_at(s, cfg) for s in range(600)]
    distinct = sorted(set(values), reverse=True)
    assert len(distinct) == 6
    assert distinct[0] == 1e-3
    for a, b in zip(distinct, distinct[1:]):
        assert b == a / 2
    assert values[:100] == [1e-3] * 100 and values[-100:] == [1e-3 / 32] * 100


def test_lr_schedule_short_run():
    cfg = TrainConfig(steps=7)
    assert lr_at(6, cfg) == 1e-3 / 32


# config


def test_split_config():
    cfg, model = split_config({"steps": 10, "channels": 8, "embed": 4, "neighborhood": 5, "unroll": 2})
    assert cfg.steps == 10 and model.channels == 8
    with pytest.raises(ValueError, match="bogus"):
        split_config({"bogus": 1})
    with pytest.raises(ValueError, match="sigma"):
        split_config({"sigma": -1})
    with pytest.raises(ValueError, match="embed"):
        split_config({"channels": 4, "embed": 8})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(task="deblur")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(task="sr", factors=(1,))
    assert TrainConfig().resolved_patch(NlrnConfig()) == 45


# loop


def test_empty_corpus():
    with pytest.raises(ValueError, match="no training images"):
        train([], tiny_cfg(), TINY)


def test_training_is_deterministic(corpus, tmp_path):
    for name in ("a", "b"):
        train(corpus, tiny_cfg(), TINY, out=tmp_path / f"{name}.ckpt", log_path=tmp_path / f"{name}.jsonl")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_log_format_and_clip(corpus, tmp_path):
    res = train(corpus, tiny_cfg(), TINY, log_path=tmp_path / "log.jsonl")
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == res.log
    assert [e["step"] for e in lines] == list(range(6))
    assert set(lines[0]) == {"step", "loss", "lr", "grad_norm"}
    assert all(e["grad_norm"] <= 0.5 + 1e-9 for e in lines)


class Interrupt(Exception):
    pass


def test_resume_equals_uninterrupted(corpus, tmp_path):
    cfg = tiny_cfg(checkpoint_every=3)
    train(corpus, cfg, TINY, out=tmp_path / "full.ckpt", log_path=tmp_path / "full.jsonl")

    def stop(entry, params):
        if entry["step"] == 4:
            raise Interrupt

    with pytest.raises(Interrupt):
        train(corpus, cfg, TINY, out=tmp_path / "part.ckpt", log_path=tmp_path / "part.jsonl", callback=stop)
    train(corpus, cfg, TINY, out=tmp_path / "part.ckpt", log_path=tmp_path / "part.jsonl", resume=True)
    assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "part.ckpt").read_bytes()
    assert (tmp_path / "full.jsonl").read_bytes() == (tmp_path / "part.jsonl").read_bytes()


def test_resume_rejects_other_model(corpus, tmp_path):
    train(corpus, tiny_cfg(steps=1), TINY, out=tmp_path / "m.ckpt")
    with pytest.raises(ValueError, match="differs"):
        train(corpus, tiny_cfg(steps=2), NlrnConfig(4, 2, 3, 3), out=tmp_path / "m.ckpt", resume=True)


def test_nan_loss_keeps_last_good_checkpoint(corpus, tmp_path):
    def poison(entry, params):
        if entry["step"] == 2:
            params.tensors["output_conv.bias"][:] = np.nan

    with pytest.raises(NumericalError, match="step 3"):
        train(corpus, tiny_cfg(checkpoint_every=2), TINY, out=tmp_path / "n.ckpt", callback=poison)
    params = ckpt.load_params(tmp_path / "n.ckpt")
    assert all(np.all(np.isfinite(v)) for v in params.tensors.values())


def test_loss_decreases_on_fixed_batch():
    patches = make_synthetic_images(8, 16, 1)
    cfg = TrainConfig(steps=200, batch_size=8, patch_size=16, scales=(1.0,), seed=1)
    res = train(patches, cfg, NlrnConfig(8, 4, 5, 2))
    losses = np.array([e["loss"] for e in res.log])
    windows = losses.reshape(4, 50).mean(axis=1)
    assert windows[-1] < windows[0]
    assert np.all(np.diff(windows) < 0), windows
