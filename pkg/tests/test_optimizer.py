import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from objsplat.optimizer import (
    ADAM_BETAS, ADAM_EPS, OptimizerState, TrainConfig, TrainingAborted, _ViewTarget, feature_step,
    features_gradient, optimize_scene, resume, save_checkpoint, view_schedule, write_log,
)
from objsplat.rasterizer import rasterize
from objsplat.scene import Camera, Codebook
from objsplat.supervision import MaskBundle

from conftest import make_scene


def one_pixel_problem(opacity, feature, d=3):
    """One Gaussian seen head-on by a 1x1 camera; its pixel is fully covered by a mask for code 0."""
    codes = np.eye(d)[:2]
    cb = Codebook(codes)
    scene = make_scene(1, d, positions=np.array([[0.0, 0.0, 2.0]]), scales=np.full((1, 3), 0.5),
                       rotations=np.array([[1.0, 0, 0, 0]]), opacities=np.array([opacity]),
                       features=np.atleast_2d(feature).astype(float))
    cam = Camera(1, 1, 1.0, 1.0, 0.5, 0.5, np.eye(4))
    bundle = MaskBundle(np.ones((1, 1, 1)), np.array([[1.0, 0.0]]))
    return scene, [(cam, None, bundle)], cb


def quiet(**kw):
    base = dict(lambda_3d=0.0, iterations=50)
    base.update(kw)
    return TrainConfig(**base)


def test_fixed_point_is_stationary():
    e = np.eye(3)[0]
    scene, views, cb = one_pixel_problem(0.5, 2 * e)
    trained, hist = optimize_scene(scene, views, cb, quiet(iterations=20))
    assert all(h["l_feature"] == 0.0 for h in hist)
    np.testing.assert_array_equal(trained.features, scene.features)


def test_single_gaussian_converges_to_least_squares_target():
    # alpha clamps at 0.99, so the exact minimizer is e / 0.99
    e = np.eye(3)[0]
    scene, views, cb = one_pixel_problem(1.0, np.array([0.01, -0.02, 0.03]))
    trained, hist = optimize_scene(scene, views, cb, quiet(iterations=200, optimizer="sgd",
                                                           learning_rate_feature=0.5))
    np.testing.assert_allclose(trained.features[0], e / 0.99, atol=1e-12)
    assert hist[-1]["l_feature"] < 1e-20
    trained, _ = optimize_scene(scene, views, cb, quiet(iterations=3000, learning_rate_feature=1e-2))
    np.testing.assert_allclose(trained.features[0], e / 0.99, atol=1e-3)


def test_adam_matches_manual_update():
    e = np.eye(3)[0]
    f0 = np.array([0.3, -0.1, 0.2])
    scene, views, cb = one_pixel_problem(0.6, f0)
    lr = 0.05
    trained, _ = optimize_scene(scene, views, cb, quiet(iterations=3, learning_rate_feature=lr))
    f, m, v = f0.copy(), np.zeros(3), np.zeros(3)
    b1, b2 = ADAM_BETAS
    for t in range(1, 4):
        g = 2 * 0.6 * (0.6 * f - e)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        f = f - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + ADAM_EPS)
    np.testing.assert_allclose(trained.features[0], f, rtol=1e-12, atol=1e-15)


def test_sgd_small_step_decreases_loss_monotonically(small_synth):
    cam, image, bundle = small_synth.train_triples[0]
    cfg = quiet(iterations=30, optimizer="sgd", learning_rate_feature=1e-3)
    _, hist = optimize_scene(small_synth.scene, [(cam, image, bundle)], small_synth.codebook, cfg)
    losses = [h["l_feature"] for h in hist]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


@given(st.integers(1, 25), st.integers(0, 2**31 - 1), st.integers(0, 5))
def test_view_schedule_is_permutation_per_epoch(n, seed, epoch):
    seen = [view_schedule(n, seed, epoch * n + i) for i in range(n)]
    assert sorted(seen) == list(range(n))


def test_feature_step_matches_reference_gradient(small_synth):
    cam, _, bundle = small_synth.train_triples[1]
    scene = small_synth.scene.copy()
    scene.features = np.random.default_rng(0).normal(size=(len(scene), small_synth.codebook.d_code))
    for include in (True, False):
        ref_loss, ref_grad = features_gradient(scene, cam, bundle, small_synth.codebook, include)
        out = rasterize(scene, cam, capture_weights=True, render_features=False)
        loss, grad = feature_step(out, scene.features, _ViewTarget(bundle, small_synth.codebook), include)
        assert loss == pytest.approx(ref_loss, rel=1e-12)
        np.testing.assert_allclose(grad, ref_grad, rtol=1e-10, atol=1e-14)


def short_config(**kw):
    base = dict(iterations=10, m=60, k=3, lambda_3d=1.0, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def strip_time(hist):
    return [{k: v for k, v in h.items() if k != "elapsed_s"} for h in hist]


def test_training_is_deterministic_and_freezes_geometry(small_synth):
    data = small_synth
    a, ha = optimize_scene(data.scene, data.train_triples, data.codebook, short_config())
    b, hb = optimize_scene(data.scene, data.train_triples, data.codebook, short_config())
    assert a.features.tobytes() == b.features.tobytes()
    assert strip_time(ha) == strip_time(hb)
    for name in ("positions", "scales", "rotations", "opacities", "colors", "gt_ids"):
        assert getattr(a, name).tobytes() == getattr(data.scene, name).tobytes(), name
    assert not np.array_equal(a.features, data.scene.features)


def test_resume_continues_same_trajectory(small_synth, tmp_path):
    data = small_synth
    full, hist_full = optimize_scene(data.scene, data.train_triples, data.codebook, short_config())
    half_cfg = short_config(iterations=5, checkpoint_every=5)
    _, hist_half = optimize_scene(data.scene, data.train_triples, data.codebook, half_cfg, checkpoint_dir=tmp_path)
    scene, state, cfg, start = resume(tmp_path)
    assert start == 5 and state.step == 5
    cfg = dataclasses.replace(cfg, iterations=10, checkpoint_every=0)
    rest, hist_rest = optimize_scene(scene, data.train_triples, data.codebook, cfg, state=state, start_iteration=start)
    assert rest.features.tobytes() == full.features.tobytes()
    assert strip_time(hist_half + hist_rest) == strip_time(hist_full)


def test_checkpoint_round_trip_and_missing(tmp_path):
    scene = make_scene(6, 4, gt_ids=np.arange(6) - 1)
    state = OptimizerState.zeros(scene)
    state.m_feat += 0.25
    state.step = 3
    save_checkpoint(tmp_path / "ck", scene, state, TrainConfig(iterations=7), 3)
    back, st_, cfg, it = resume(tmp_path / "ck")
    assert back.equals(scene) and np.array_equal(back.gt_ids, scene.gt_ids)
    assert it == 3 and st_.step == 3 and cfg.iterations == 7
    np.testing.assert_array_equal(st_.m_feat, state.m_feat)
    with pytest.raises(FileNotFoundError):
        resume(tmp_path / "nothing")


def test_divergence_aborts_with_message():
    scene, views, cb = one_pixel_problem(0.9, np.array([0.1, 0.2, 0.3]))
    cfg = quiet(iterations=2000, optimizer="sgd", learning_rate_feature=1e6)
    with pytest.raises(TrainingAborted, match="iteration"):
        with np.errstate(over="ignore", invalid="ignore"):
            optimize_scene(scene, views, cb, cfg)


def test_color_optimization_moves_only_colors(small_synth):
    data = small_synth
    start = data.scene.copy()
    start.colors[:] = 0.5
    cfg = short_config(iterations=4, optimize_color=True, learning_rate_color=1e-2)
    trained, hist = optimize_scene(start, data.train_triples, data.codebook, cfg)
    assert not np.array_equal(trained.colors, start.colors)
    assert trained.colors.min() >= 0 and trained.colors.max() <= 1
    assert trained.positions.tobytes() == start.positions.tobytes()
    assert all(h["l_rend"] > 0 for h in hist)


def test_input_validation(small_synth, tmp_path):
    data = small_synth
    with pytest.raises(ValueError):
        TrainConfig(iterations=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop").validate()
    with pytest.raises(ValueError):
        optimize_scene(data.scene, [], data.codebook)
    cam, image, bundle = data.train_triples[0]
    small = MaskBundle(bundle.masks[:, :10, :10], bundle.gamma)
    with pytest.raises(ValueError, match="mask size"):
        optimize_scene(data.scene, [(cam, image, small)], data.codebook)
    _, hist = optimize_scene(data.scene, data.train_triples, data.codebook, short_config(iterations=2))
    write_log(hist, tmp_path / "log.jsonl")
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 2
