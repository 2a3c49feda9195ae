from unittest.mock import patch

from dbarf.cli.cli import (
    ba_lab_command,
    evaluate_command,
    make_scene_command,
    pretrain_command,
    render_command,
    scene_graph_command,
)
from dbarf.core.models import RunConfig, SceneSpec
from dbarf.core.synth import oracle_scene_spec


def test_pretrain_command():
    """Test pretrain command."""
    config = RunConfig(scenes=[5], seed=9)
    with patch("dbarf.cli.cli.load_config") as mock_load, patch(
        "dbarf.cli.cli.cmd_pretrain"
    ) as mock_pretrain:
        mock_load.return_value = config
        pretrain_command(out="dummy_out", config="dummy_config.yaml", verbose=False)
        mock_load.assert_called_once_with("dummy_config.yaml")
        mock_pretrain.assert_called_once_with(config, "dummy_out")
        assert mock_pretrain.call_args.args[0].seed == 9


def test_pretrain_command_defaults_without_config():
    """Test pretrain command falls back to the default run config."""
    with patch("dbarf.cli.cli.load_config") as mock_load, patch(
        "dbarf.cli.cli.cmd_pretrain"
    ) as mock_pretrain:
        pretrain_command(out="dummy_out")
        mock_load.assert_not_called()
        assert mock_pretrain.call_args.args[0] == RunConfig()


def test_run_seed_overrides_config_seed():
    """Test --seed replaces the run seed of a loaded config and of the defaults."""
    config = RunConfig(scenes=[5], seed=9)
    with patch("dbarf.cli.cli.load_config") as mock_load, patch(
        "dbarf.cli.cli.cmd_pretrain"
    ) as mock_pretrain:
        mock_load.return_value = config
        pretrain_command(out="dummy_out", seed=3, config="dummy_config.yaml")
        used = mock_pretrain.call_args.args[0]
        assert used.seed == 3
        assert used.scenes == [5]
        assert config.seed == 9

        pretrain_command(out="dummy_out", seed=0)
        assert mock_pretrain.call_args.args[0] == RunConfig(seed=0)


def test_evaluate_and_render_commands():
    """Test evaluate and render commands pass the scene seed and view."""
    with patch("dbarf.cli.cli.cmd_evaluate") as mock_eval, patch(
        "dbarf.cli.cli.cmd_render"
    ) as mock_render:
        evaluate_command(checkpoint="ckpt.dbrf", out="eval", scene=2)
        render_command(checkpoint="ckpt.dbrf", out="render", view=3, scene=1, seed=7)
        mock_eval.assert_called_once_with("ckpt.dbrf", 2, RunConfig(), "eval")
        mock_render.assert_called_once_with("ckpt.dbrf", 1, 3, RunConfig(seed=7), "render")


def test_ba_lab_command_without_checkpoint():
    """Test ba-lab command passes None when no checkpoint is given."""
    with patch("dbarf.cli.cli.cmd_ba_lab") as mock_lab:
        ba_lab_command(mode="barf-pe", out="lab", scene=4, seed=2)
        mock_lab.assert_called_once_with(None, 4, "barf-pe", RunConfig(seed=2), "lab")


def test_scene_graph_command_with_images():
    """Test scene-graph command on an image folder."""
    with patch("dbarf.cli.cli.cmd_scene_graph") as mock_graph:
        scene_graph_command(out="graph", images="folder", seed=5)
        mock_graph.assert_called_once_with(RunConfig(seed=5), "graph", 0, "folder")


def test_make_scene_command():
    """Test make-scene command with a spec file, the config and the oracle scene."""
    spec = SceneSpec(seed=8, plane_count=2)
    with patch("dbarf.cli.cli.load_scene_spec") as mock_spec, patch(
        "dbarf.cli.cli.cmd_make_scene"
    ) as mock_make:
        mock_spec.return_value = spec
        make_scene_command(out="scene", spec="scene.yaml")
        mock_spec.assert_called_once_with("scene.yaml")
        mock_make.assert_called_once_with(spec, "scene")

        mock_make.reset_mock()
        make_scene_command(out="scene", scene=6)
        assert mock_make.call_args.args[0] == RunConfig().scene_spec(6)

        mock_make.reset_mock()
        make_scene_command(out="scene", scene=2, oracle=True)
        oracle = mock_make.call_args.args[0]
        assert oracle == oracle_scene_spec(2)
        assert oracle.plane_count == 1 and oracle.texture_octaves == 2
