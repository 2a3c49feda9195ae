"""Test configuration models and their YAML loading."""

import os
import tempfile

import pytest
import yaml
from pydantic import ValidationError

from dbarf.core.models import (
    RunConfig,
    SceneSpec,
    architecture_hash,
    load_config,
    load_scene_spec,
    save_config,
    split_views,
)


def test_config_yaml_round_trip():
    config = RunConfig(scenes=[1, 2], t_max=3, dtype="float64")
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "config.yaml")
        save_config(config, path)
        loaded = load_config(path)
    assert loaded == config


def test_load_config_flattens_workflow_section():
    data = {"workdir": "runs", "dbarf": {"t_max": 2, "scenes": [7]}, "other": {"a": 1}}
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "workflow.yaml")
        with open(path, "w") as f:
            yaml.dump(data, f)
        config = load_config(path)
    assert config.t_max == 2
    assert config.scenes == [7]


def test_load_config_rejects_non_mapping():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "bad.yaml")
        with open(path, "w") as f:
            f.write("- 1\n- 2\n")
        with pytest.raises(ValueError):
            load_config(path)


@pytest.mark.parametrize(
    "overrides",
    [
        {"near": 5.0, "far": 2.0},
        {"depth_min": 6.0, "depth_max": 2.0},
        {"feature_channels": [4, 8]},
        {"barf_pe_schedule": [0.6, 0.2]},
        {"t_max": 0},
        {"alpha": 1.5},
    ],
)
def test_config_validation(overrides):
    with pytest.raises(ValidationError):
        RunConfig(**overrides)


def test_scene_spec_from_config_and_file():
    config = RunConfig(plane_count=2, n_views_per_scene=7)
    spec = config.scene_spec(4)
    assert spec.seed == 4 and spec.plane_count == 2 and spec.n_views == 7
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, "scene.yaml")
        with open(path, "w") as f:
            yaml.dump({"scene": {"seed": 9, "trajectory": "orbit"}}, f)
        loaded = load_scene_spec(path)
    assert loaded.seed == 9 and loaded.trajectory == "orbit"
    with pytest.raises(ValidationError):
        SceneSpec(plane_count=5)


def test_architecture_hash_tracks_architecture_only():
    base = RunConfig()
    assert architecture_hash(base) == architecture_hash(RunConfig(lr_pose=1.0, scenes=[9]))
    assert architecture_hash(base) != architecture_hash(RunConfig(gru_hidden=32))
    assert len(architecture_hash(base)) == 64


def test_split_views():
    train, heldout = split_views(12, 4)
    assert heldout == [2, 6, 10]
    assert sorted(train + heldout) == list(range(12))
    assert not set(train) & set(heldout)
