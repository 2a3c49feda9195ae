"""dbarf: bundle-adjusting generalizable neural rendering at desk scale."""

from .core.pipeline_step import DbarfPretrainStep
from .core.training import cmd_evaluate, cmd_finetune, cmd_pretrain, cmd_render

__version__ = "0.1.0"
__all__ = [
    "cmd_pretrain",
    "cmd_finetune",
    "cmd_evaluate",
    "cmd_render",
    "DbarfPretrainStep",
]
