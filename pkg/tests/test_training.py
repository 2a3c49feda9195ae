"""Test the optimizer, training loop and harness commands."""

import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from dbarf.core.autodiff import Tensor
from dbarf.core.checkpoint import load_checkpoint
from dbarf.core.errors import ConfigHashMismatchError, SplitViolationError
from dbarf.core.geometry import Intrinsics
from dbarf.core.image_io import load_image_folder, read_depth
from dbarf.core.models import METRICS_COLUMNS, TRAJECTORY_COLUMNS, architecture_hash
from dbarf.core.scene_graph import SceneGraph, load_scene_graph, select_neighbors
from dbarf.core.training import (
    Adam,
    DbarfModel,
    SceneData,
    SplitAudit,
    build_model,
    choose_neighbors,
    cmd_evaluate,
    cmd_finetune,
    cmd_make_scene,
    cmd_pretrain,
    cmd_render,
    cmd_scene_graph,
    group_of,
    load_model,
    sample_ray_crop,
)

from .conftest import make_tiny_config


def test_adam_first_step_moves_by_rate():
    params = {"pose.a": Tensor(np.zeros(3), requires_grad=True), "feature.b": Tensor(np.ones(2), requires_grad=True)}
    adam = Adam(params, {"pose": 0.1, "feature": 0.01}, clip=np.inf)
    norms = adam.step({"pose.a": np.array([3.0, -4.0, 0.0]), "feature.b": np.array([1.0, 1.0])})
    np.testing.assert_allclose(params["pose.a"].data, [-0.1, 0.1, 0.0], atol=1e-6)
    np.testing.assert_allclose(params["feature.b"].data, [0.99, 0.99], atol=1e-6)
    assert norms["pose"] == pytest.approx(5.0)
    assert group_of("renderer.color2.w") == "renderer"


def test_adam_clips_group_norm():
    params = {"pose.a": Tensor(np.zeros(2), requires_grad=True)}
    adam = Adam(params, {"pose": 0.1}, clip=1.0)
    norms = adam.step({"pose.a": np.array([30.0, 40.0])})
    assert norms["pose"] == pytest.approx(50.0)
    np.testing.assert_allclose(adam.m["pose.a"], 0.1 * np.array([0.6, 0.8]))


def test_model_checkpoint_round_trip(tiny_config):
    model = build_model(tiny_config)
    again = build_model(tiny_config)
    for name, p in model.params.items():
        np.testing.assert_array_equal(p.data, again.params[name].data)
    model.stats.update(np.ones((3, 8)))
    restored = DbarfModel.from_checkpoint(model.checkpoint(7), tiny_config)
    assert restored.config_hash == architecture_hash(tiny_config)
    assert restored.stats.count == 1
    np.testing.assert_array_equal(restored.stats.mean, model.stats.mean)
    for name, p in model.params.items():
        np.testing.assert_array_equal(restored.params[name].data, p.data)
        assert restored.params[name].requires_grad


def _scene_with_graph(graph):
    return SceneData(0, None, [None] * graph.n_images, None, None, [0, 1, 3, 4], [2], graph)


def test_choose_neighbors_uses_graph_then_capture_order(caplog):
    graph = SceneGraph(n_images=5)
    graph.add_edge(0, 4, 50)
    graph.add_edge(0, 2, 80)
    graph.add_edge(0, 1, 20)
    scene = _scene_with_graph(graph)
    assert choose_neighbors(scene, 0, 2, scene.train_views) == [4, 1]
    assert choose_neighbors(scene, 0, 2, scene.train_views) == select_neighbors(
        graph, 0, 2, set(scene.train_views)
    )
    assert "isolated" not in caplog.text
    assert choose_neighbors(scene, 3, 2, scene.train_views) == [4, 1]
    assert "isolated" in caplog.text
    assert "capture order" in caplog.text


def test_split_audit():
    audit = SplitAudit({0: [2]})
    audit.check(0, [0, 1, 3])
    audit.check(1, [2])
    assert audit.batches == 2
    with pytest.raises(SplitViolationError):
        audit.check(0, [1, 2])


def test_sample_ray_crop():
    K = Intrinsics(fx=30.0, fy=30.0, cx=15.5, cy=11.5, width=32, height=24)
    pixels, shape, crop = sample_ray_crop(np.random.default_rng(0), K, 20)
    assert shape == (4, 4) and len(pixels) == 16
    image = np.arange(24 * 32).reshape(24, 32)
    np.testing.assert_array_equal(
        image[crop].ravel(), image[pixels[:, 1].astype(int), pixels[:, 0].astype(int)]
    )


def test_pretrain_writes_outputs_and_is_deterministic():
    config = make_tiny_config()
    with tempfile.TemporaryDirectory() as tmpdir:
        first = cmd_pretrain(config, os.path.join(tmpdir, "a"))
        second = cmd_pretrain(config, os.path.join(tmpdir, "b"))
        assert first.read_bytes() == second.read_bytes()
        metrics_a = pd.read_csv(first.parent / "metrics.csv")
        metrics_b = pd.read_csv(second.parent / "metrics.csv")
        assert list(metrics_a.columns) == METRICS_COLUMNS
        pd.testing.assert_frame_equal(metrics_a, metrics_b)
        assert len(metrics_a) <= config.pretrain_iters
        assert (first.parent / "config.yaml").exists()
        graph = load_scene_graph(first.parent / "scene_graph_0.txt")
        assert graph.n_images == config.n_views_per_scene
        ckpt = load_checkpoint(first, expected_hash=architecture_hash(config))
        assert ckpt.step == config.pretrain_iters
        assert ckpt.metadata["stage"] == "pretrain"


def test_pretrain_without_iterations_keeps_initial_weights():
    config = make_tiny_config(pretrain_iters=0)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = cmd_pretrain(config, tmpdir)
        model, ckpt = load_model(path, config)
        assert ckpt.step == 0
        assert pd.read_csv(Path(tmpdir) / "metrics.csv").empty
    fresh = build_model(config)
    for name, p in fresh.params.items():
        np.testing.assert_array_equal(model.params[name].data, p.data)


def test_finetune_continues_from_checkpoint():
    config = make_tiny_config(pretrain_iters=1, finetune_iters=0)
    with tempfile.TemporaryDirectory() as tmpdir:
        pre = cmd_pretrain(config, os.path.join(tmpdir, "pre"))
        fine = cmd_finetune(pre, 0, config, os.path.join(tmpdir, "fine"))
        before, after = load_checkpoint(pre), load_checkpoint(fine)
        assert after.step == before.step
        assert after.metadata["stage"] == "finetune"
        assert after.metadata["parent_step"] == before.step
        for name, arr in before.tensors.items():
            np.testing.assert_array_equal(after.tensors[name], arr)


def test_checkpoint_from_other_architecture_is_refused():
    config = make_tiny_config(pretrain_iters=0)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = cmd_pretrain(config, tmpdir)
        with pytest.raises(ConfigHashMismatchError):
            load_model(path, make_tiny_config(gru_hidden=4))


def test_evaluate_and_render():
    config = make_tiny_config(pretrain_iters=0)
    with tempfile.TemporaryDirectory() as tmpdir:
        ckpt = cmd_pretrain(config, os.path.join(tmpdir, "pre"))
        eval_dir = Path(tmpdir) / "eval"
        df = cmd_evaluate(ckpt, 0, config, eval_dir)
        assert list(df.columns) == METRICS_COLUMNS
        assert len(df) == 1
        assert df["psnr"].between(0, 99).all()
        assert (eval_dir / "images" / "view_002.png").exists()
        depth, valid = read_depth(eval_dir / "depths" / "view_002.png")
        assert depth.shape == (32, 32)
        trajectories = pd.read_csv(eval_dir / "trajectories.csv")
        assert list(trajectories.columns) == TRAJECTORY_COLUMNS
        assert set(trajectories["iteration"]) == set(range(config.t_max + 1))

        image = cmd_render(ckpt, 0, 1, config, Path(tmpdir) / "render")
        assert image.exists()
        with pytest.raises(ValueError):
            cmd_render(ckpt, 0, 99, config, Path(tmpdir) / "render")


def test_make_scene_and_folder_scene_graph():
    config = make_tiny_config()
    spec = config.scene_spec(3)
    with tempfile.TemporaryDirectory() as tmpdir:
        scene_dir = cmd_make_scene(spec, Path(tmpdir) / "scene")
        folder = load_image_folder(scene_dir)
        assert len(folder.images) == spec.n_views
        assert len(folder.poses) == spec.n_views
        assert folder.intrinsics.fx == spec.focal
        assert (scene_dir / "scene.yaml").exists()
        depth, valid = read_depth(scene_dir / "depths" / "view_000.png")
        assert valid.any() and (depth[valid] > 0).all()
        assert np.isinf(depth[~valid]).all()

        graph = cmd_scene_graph(config, Path(tmpdir) / "graph", images_dir=scene_dir)
        assert graph.n_images == spec.n_views
        saved = load_scene_graph(Path(tmpdir) / "graph" / "scene_graph.txt")
        assert saved.edges == graph.edges


def test_scene_graph_of_synthetic_scene():
    config = make_tiny_config()
    with tempfile.TemporaryDirectory() as tmpdir:
        graph = cmd_scene_graph(config, tmpdir, scene_seed=1)
        assert os.path.exists(os.path.join(tmpdir, "scene_graph.txt"))
    assert graph.n_images == config.n_views_per_scene
