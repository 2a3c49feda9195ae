"""Test the feature-metric cost map and the recurrent pose-depth optimizer."""

import logging

import numpy as np
import pytest

from dbarf.core.autodiff import Tape, Tensor, backward, gradient_check
from dbarf.core.errors import DomainError, OptimizerDivergedError
from dbarf.core.geometry import Intrinsics, SE3Pose, relative_pose, se3_exp, se3_log
from dbarf.core.losses import loss_depth_smooth, loss_final, loss_photo_warp, loss_rgb
from dbarf.core.pose_optimizer import (
    OptState,
    RunningStats,
    build_cost_map,
    init_state,
    optimize,
    recurrent_update,
    sample_patch_corners,
    upsample_inverse_depth,
)
from dbarf.core.renderer import FeaturePyramid, SourceView, extract_pyramid, render_rays
from dbarf.core.synth import make_scene, oracle_scene_spec, render_views, sample_trajectory
from dbarf.core.training import build_model, downsample_image

from .conftest import COMPOSITE_TOL, GRADIENT_SEEDS, bilinear_map, make_tiny_config

K = Intrinsics(fx=30.0, fy=30.0, cx=15.5, cy=15.5, width=32, height=32)


@pytest.fixture
def setup(tiny_config):
    model = build_model(tiny_config)
    rng = np.random.default_rng(0)
    images = [rng.uniform(size=(32, 32, 3)) for _ in range(3)]
    pyramids = [extract_pyramid(im, model.params, i) for i, im in enumerate(images)]
    return tiny_config, model, pyramids


def test_init_state(tiny_config):
    config = tiny_config.model_copy(update={"init_eps": 0.0})
    state = init_state(2, (8, 8), config)
    np.testing.assert_array_equal(state.poses.data, np.tile(np.eye(4), (2, 1, 1)))
    np.testing.assert_allclose(state.inv_depth.data, 0.5 * (1.0 + 1.0 / 9.0))
    assert state.hidden.shape == (2, tiny_config.gru_hidden)
    with pytest.raises(ValueError):
        init_state(0, (8, 8), config)


def test_init_state_perturbation_is_bounded(tiny_config):
    state = init_state(4, (8, 8), tiny_config, seed=3)
    for m in state.poses.data:
        xi = se3_log(SE3Pose.from_matrix(m))
        assert np.abs(xi).max() <= tiny_config.init_eps + 1e-12


def test_cost_vanishes_at_identity_with_same_view(setup):
    config, _, pyramids = setup
    config = config.model_copy(update={"init_eps": 0.0})
    state = init_state(1, (8, 8), config)
    corners = np.array([[0, 0], [3, 2]])
    cost = build_cost_map(pyramids[0], [pyramids[0]], K, [K], state, corners, config)
    assert cost.residuals.shape == (1, 2 * 16, 8)
    assert cost.valid.all()
    assert np.abs(cost.residuals.data).max() < 1e-9
    assert cost.mean_cost < 1e-8
    assert cost.patch_mask.all()


def test_cost_map_rejects_patches_outside(setup):
    config, _, pyramids = setup
    state = init_state(1, (8, 8), config)
    with pytest.raises(DomainError):
        build_cost_map(pyramids[0], [pyramids[1]], K, [K], state, np.array([[6, 0]]), config)


def test_unseen_patches_are_dropped(setup, caplog):
    config, _, pyramids = setup
    state = init_state(1, (8, 8), config)
    far_away = np.eye(4)
    far_away[0, 3] = 100.0
    state.poses = Tensor(far_away[None])
    with caplog.at_level(logging.WARNING):
        cost = build_cost_map(
            pyramids[0], [pyramids[1]], K, [K], state, np.array([[0, 0]]), config
        )
    assert not cost.patch_mask.any()
    assert np.isnan(cost.mean_cost)
    assert "Dropped" in caplog.text


def test_patch_corners_stay_inside():
    rng = np.random.default_rng(1)
    corners = sample_patch_corners(rng, (8, 10), 4, 50)
    assert (corners[:, 0] <= 6).all() and (corners[:, 1] <= 4).all()
    with pytest.raises(DomainError):
        sample_patch_corners(rng, (3, 10), 4, 1)


def test_update_respects_caps(setup):
    config, model, pyramids = setup
    for name in ("pose.head.w", "pose.depth2.w"):
        model.params[name].data = model.params[name].data * 1e4
    state = init_state(2, (8, 8), config, seed=1)
    corners = np.array([[0, 0], [4, 4]])
    cost = build_cost_map(pyramids[0], pyramids[1:], K, [K, K], state, corners, config)
    new = recurrent_update(state, cost, pyramids[0], K, model.params, model.stats, config)
    assert new.iteration == 1
    for before, after in zip(state.poses.data, new.poses.data):
        delta = SE3Pose.from_matrix(after @ np.linalg.inv(before))
        assert np.abs(se3_log(delta)).max() <= config.twist_cap + 1e-9
    change = np.abs(new.inv_depth.data - state.inv_depth.data)
    assert change.max() <= config.depth_cap + 1e-12
    assert new.inv_depth.data.min() >= 1.0 / config.far
    assert new.inv_depth.data.max() <= 1.0 / config.near


def test_zero_heads_leave_state_unchanged(setup):
    config, model, pyramids = setup
    for name in ("pose.head.w", "pose.head.b", "pose.depth2.w", "pose.depth2.b"):
        model.params[name].data = np.zeros_like(model.params[name].data)
    state = init_state(2, (8, 8), config, seed=2)
    cost = build_cost_map(pyramids[0], pyramids[1:], K, [K, K], state, np.array([[1, 1]]), config)
    new = recurrent_update(state, cost, pyramids[0], K, model.params, model.stats, config)
    np.testing.assert_array_equal(new.poses.data, state.poses.data)
    np.testing.assert_array_equal(new.inv_depth.data, state.inv_depth.data)


def test_non_finite_head_diverges(setup):
    config, model, pyramids = setup
    model.params["pose.head.b"].data = np.full(6, np.nan)
    with pytest.raises(OptimizerDivergedError):
        optimize(pyramids[0], pyramids[1:], K, [K, K], model.params, model.stats, config)


def test_optimize_callback_and_determinism(setup):
    config, model, pyramids = setup
    seen = []

    def callback(state, cost):
        seen.append((state.iteration, cost is None))

    a = optimize(
        pyramids[0], pyramids[1:], K, [K, K], model.params, model.stats, config, seed=5, callback=callback
    )
    b = optimize(pyramids[0], pyramids[1:], K, [K, K], model.params, model.stats, config, seed=5)
    assert seen == [(0, False), (1, False), (2, True)]
    assert a.iteration == config.t_max
    np.testing.assert_array_equal(a.poses.data, b.poses.data)
    np.testing.assert_array_equal(a.inv_depth.data, b.inv_depth.data)


def test_gradients_reach_optimizer_and_features(setup):
    config, model, _ = setup
    rng = np.random.default_rng(4)
    images = [rng.uniform(size=(32, 32, 3)) for _ in range(2)]
    names = ("pose.head.b", "feature.conv2.b")

    def fn(head_b, conv_b):
        params = dict(model.params, **dict(zip(names, (head_b, conv_b))))
        pyramids = [extract_pyramid(im, params, i) for i, im in enumerate(images)]
        state = optimize(pyramids[0], pyramids[1:], K, [K], params, model.stats, config)
        shift = state.poses[:, :3, 3]
        return (shift * shift).sum() + (state.inv_depth * state.inv_depth).mean()

    arrays = [model.params[n].data + rng.uniform(-0.05, 0.05, model.params[n].shape) for n in names]
    assert gradient_check(fn, arrays, h=1e-6) < COMPOSITE_TOL

    with Tape() as tape:
        pyramids = [extract_pyramid(im, model.params, i) for i, im in enumerate(images)]
        state = optimize(
            pyramids[0], pyramids[1:], K, [K], model.params, model.stats, config, training=True
        )
        loss = (state.poses * state.poses).sum() + state.inv_depth.sum()
    (grad,) = backward(tape, loss, inputs=[model.params["pose.gru.w_z"]])
    assert np.abs(grad).sum() > 0
    assert model.stats.count == config.t_max


@pytest.mark.parametrize("seed", GRADIENT_SEEDS[:10])
def test_final_loss_gradient_through_recurrent_updates(tiny_config, seed):
    """GRU gates -> poses and depth -> rendered colour, warp and smoothness -> blended loss."""
    model = build_model(tiny_config, seed=seed)
    for name in ("pose.head.w", "pose.depth2.w"):
        model.params[name].data = model.params[name].data * 10.0
    rng = np.random.default_rng(seed)
    image0 = bilinear_map(rng, 32, 32, 3)
    image1 = image0 + 0.3
    pyramids = [extract_pyramid(im, model.params, i) for i, im in enumerate((image0, image1))]
    pixels = np.array([[14.0, 15.0], [17.0, 16.0], [15.5, 18.0], [16.0, 13.0]])
    target = rng.uniform(0.2, 0.8, (4, 3))
    names = ("pose.gru.b_z", "pose.gru.b_r", "pose.gru.b_h")

    def fn(b_z, b_r, b_h):
        params = dict(model.params, **dict(zip(names, (b_z, b_r, b_h))))
        state = optimize(
            pyramids[0], pyramids[1:], K, [K], params, model.stats, tiny_config, seed=seed
        )
        render = render_rays(
            pixels, K, [SourceView(image1, K, pyramids[1])], state.poses, params, 1.0, 4.0, 3
        )
        assert render.ray_valid.all()
        l_rgb = loss_rgb(render.rgb, target)
        full_inv = upsample_inverse_depth(state.inv_depth, 4, 32, 32)
        l_photo = loss_photo_warp(image0, [image1], state.poses, full_inv, K, [K])
        small = downsample_image(image0, 4, state.inv_depth.shape)
        l_depth = loss_depth_smooth(state.inv_depth, small)
        final, _ = loss_final(l_rgb, l_depth, l_photo, t=5000)
        return final

    arrays = [model.params[n].data + rng.uniform(-0.1, 0.1, model.params[n].shape) for n in names]
    assert gradient_check(fn, arrays, h=1e-6, seed=seed) < COMPOSITE_TOL


def _oracle_pair(seed: int):
    """Two neighboring arc views of a single textured backdrop, exact depth and pose."""
    scene = make_scene(oracle_scene_spec(seed))
    poses = sample_trajectory(scene, scene.spec.n_views)
    intrinsics = scene.intrinsics()
    images, depths = render_views(scene, poses[:2], intrinsics)
    assert depths[0].valid.all()
    return images, depths[0], relative_pose(poses[0], poses[1]), intrinsics


def _oracle_cost(images, depth, pose: SE3Pose, intrinsics, config) -> float:
    # Raw images stand in for a stride-1 feature level.
    pyramids = [FeaturePyramid([Tensor(im)], (1,), i) for i, im in enumerate(images)]
    state = OptState(
        poses=Tensor(pose.matrix()[None]),
        inv_depth=Tensor(depth.inv_depth),
        hidden=Tensor(np.zeros((1, config.gru_hidden))),
    )
    h, w = depth.inv_depth.shape
    rng = np.random.default_rng(0)
    corners = sample_patch_corners(rng, (h - 24, w - 24), config.patch_size, config.n_patches) + 12
    cost = build_cost_map(
        pyramids[0], pyramids[1:], intrinsics, [intrinsics], state, corners, config, level=0
    )
    assert cost.patch_mask.all()
    return cost.mean_cost


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cost_vanishes_with_exact_pose_and_depth(seed):
    config = make_tiny_config(patch_size=8, n_patches=32)
    images, depth, rel, intrinsics = _oracle_pair(seed)
    # Only bilinear resampling of the smooth texture is left.
    assert _oracle_cost(images, depth, rel, intrinsics, config) <= 2e-3


def test_cost_grows_with_pose_error():
    config = make_tiny_config(patch_size=8, n_patches=32)
    images, depth, rel, intrinsics = _oracle_pair(0)
    direction = np.array([0.3, -0.2, 0.1, 0.6, 0.5, -0.5])
    direction /= np.linalg.norm(direction)
    exact = _oracle_cost(images, depth, rel, intrinsics, config)
    costs = [
        _oracle_cost(images, depth, se3_exp(direction * norm).compose(rel), intrinsics, config)
        for norm in np.geomspace(3e-3, 6e-2, 8)
    ]
    assert costs[0] > exact
    assert all(b > a for a, b in zip(costs, costs[1:]))


def test_running_stats():
    stats = RunningStats.create(2, momentum=0.5)
    stats.update(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(stats.mean, [2.0, 3.0])
    stats.update(np.array([[4.0, 5.0]]))
    np.testing.assert_array_equal(stats.mean, [3.0, 4.0])
    stats.update(np.zeros((0, 2)))
    assert stats.count == 2


def test_upsample_inverse_depth():
    inv = Tensor(np.arange(4.0).reshape(2, 2))
    full = upsample_inverse_depth(inv, 4, 7, 8)
    assert full.shape == (7, 8)
    assert full.data[0, 0] == 0.0 and full.data[6, 7] == 3.0 and full.data[3, 4] == 1.0
