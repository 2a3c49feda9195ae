"""Test example workflow."""

import os
import tempfile

import pandas as pd
import yaml

import dbarf
from dbarf.core.models import load_config
from dbarf.core.scene_graph import load_scene_graph
from dbarf.core.training import cmd_make_scene, cmd_scene_graph

from .conftest import make_tiny_config


def test_example_workflow():
    """Make a scene, build its graph, pretrain, fine-tune and evaluate."""
    with tempfile.TemporaryDirectory() as tmpdir:
        # Write a run config the way a user would
        config_data = make_tiny_config(pretrain_iters=2, finetune_iters=1).model_dump()
        config_path = os.path.join(tmpdir, "config.yaml")
        with open(config_path, "w") as f:
            yaml.dump(config_data, f)
        config = load_config(config_path)

        scene_dir = cmd_make_scene(config.scene_spec(0), os.path.join(tmpdir, "scene"))
        graph = cmd_scene_graph(config, os.path.join(tmpdir, "graph"), images_dir=scene_dir)
        saved = load_scene_graph(os.path.join(tmpdir, "graph", "scene_graph.txt"))
        assert saved.edges == graph.edges

        checkpoint = dbarf.cmd_pretrain(config, os.path.join(tmpdir, "pretrain"))
        tuned = dbarf.cmd_finetune(checkpoint, 0, config, os.path.join(tmpdir, "finetune"))
        metrics = dbarf.cmd_evaluate(tuned, 0, config, os.path.join(tmpdir, "eval"))
        image = dbarf.cmd_render(tuned, 0, 0, config, os.path.join(tmpdir, "render"))

        # Check results
        assert os.path.exists(image)
        assert len(metrics) == 1
        assert pd.read_csv(os.path.join(tmpdir, "eval", "metrics.csv")).shape == metrics.shape
        finetune_metrics = pd.read_csv(os.path.join(tmpdir, "finetune", "metrics.csv"))
        assert (finetune_metrics["step"] >= config.pretrain_iters).all()
