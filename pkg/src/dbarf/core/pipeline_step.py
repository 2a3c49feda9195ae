"""Statesman step for pretraining the renderer and pose optimizer."""

from pathlib import Path

from statesman import Statesman

from .models import load_config
from .training import cmd_pretrain


class DbarfPretrainStep(Statesman):
    """Statesman step that pretrains into ``<workdir>/dbarf``."""

    workdir_key = "workdir"
    input_files = []
    output_files = ["dbarf/checkpoint.dbrf", "dbarf/metrics.csv"]
    dependent_sections = ["dbarf"]

    def _execute(self):
        """Execute the pretraining step."""
        self.logger.info("Executing DbarfPretrainStep: pretraining on synthetic scenes.")
        config_dir = Path(self.config_path).parent
        workdir = config_dir / self.config["workdir"]
        output_dir = workdir / "dbarf"
        output_dir.mkdir(parents=True, exist_ok=True)
        config = load_config(self.config_path)
        checkpoint = cmd_pretrain(config, output_dir)
        self.logger.info(f"Pretraining completed, checkpoint saved to {checkpoint}")
