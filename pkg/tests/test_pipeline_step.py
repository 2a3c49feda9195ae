"""Test DbarfPretrainStep class."""

import os
import tempfile
from unittest.mock import MagicMock

import yaml

from dbarf.core.checkpoint import load_checkpoint
from dbarf.core.pipeline_step import DbarfPretrainStep

from .conftest import make_tiny_config


def test_dbarf_pretrain_step():
    # Workflow config with a dbarf section
    section = make_tiny_config(pretrain_iters=1).model_dump()
    config_data = {"workdir": "test_workdir", "dbarf": section}

    with tempfile.TemporaryDirectory() as tmpdir:
        config_path = os.path.join(tmpdir, "config.yaml")
        output_dir = os.path.join(tmpdir, "test_workdir", "dbarf")

        with open(config_path, "w") as f:
            yaml.dump(config_data, f)

        step = DbarfPretrainStep(config_path)
        step.config = config_data
        step.logger = MagicMock()

        step._execute()

        for name in ("checkpoint.dbrf", "metrics.csv", "config.yaml", "scene_graph_0.txt"):
            assert os.path.exists(os.path.join(output_dir, name))
        assert load_checkpoint(os.path.join(output_dir, "checkpoint.dbrf")).step == 1
        step.logger.info.assert_called()
