"""CLI entry point using treeparse."""

import logging
from typing import Optional

from rich.logging import RichHandler
from treeparse import cli, command, option

from ..core.ba_lab import cmd_ba_lab
from ..core.models import RunConfig, load_config, load_scene_spec
from ..core.synth import oracle_scene_spec
from ..core.training import (
    cmd_evaluate,
    cmd_finetune,
    cmd_make_scene,
    cmd_pretrain,
    cmd_render,
    cmd_scene_graph,
)

logging.basicConfig(
    level=logging.INFO,
    format="%(message)s",
    handlers=[RichHandler(show_time=False)],
)


def _setup(config: Optional[str], verbose: bool, seed: int = -1) -> RunConfig:
    """Load the run config; a non-negative ``seed`` replaces its run seed."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    run_config = load_config(config) if config else RunConfig()
    if seed >= 0:
        run_config = run_config.model_copy(update={"seed": seed})
    return run_config


def pretrain_command(
    out: str, seed: int = -1, config: str = "", verbose: bool = False
) -> None:
    """Pretrain renderer and pose optimizer across the configured scenes."""
    run_config = _setup(config, verbose, seed)
    cmd_pretrain(run_config, out)


def finetune_command(
    checkpoint: str,
    out: str,
    scene: int = 0,
    seed: int = -1,
    config: str = "",
    verbose: bool = False,
) -> None:
    """Fine-tune a pretrained checkpoint on one scene."""
    run_config = _setup(config, verbose, seed)
    cmd_finetune(checkpoint, scene, run_config, out)


def evaluate_command(
    checkpoint: str,
    out: str,
    scene: int = 0,
    seed: int = -1,
    config: str = "",
    verbose: bool = False,
) -> None:
    """Render held-out views and report image and pose metrics."""
    run_config = _setup(config, verbose, seed)
    cmd_evaluate(checkpoint, scene, run_config, out)


def render_command(
    checkpoint: str,
    out: str,
    view: int = 0,
    scene: int = 0,
    seed: int = -1,
    config: str = "",
    verbose: bool = False,
) -> None:
    """Render a single view."""
    run_config = _setup(config, verbose, seed)
    cmd_render(checkpoint, scene, view, run_config, out)


def ba_lab_command(
    mode: str,
    out: str,
    checkpoint: str = "",
    scene: int = 0,
    seed: int = -1,
    config: str = "",
    verbose: bool = False,
) -> None:
    """Run a pose-refinement divergence experiment."""
    run_config = _setup(config, verbose, seed)
    cmd_ba_lab(checkpoint or None, scene, mode, run_config, out)


def scene_graph_command(
    out: str,
    scene: int = 0,
    images: str = "",
    seed: int = -1,
    config: str = "",
    verbose: bool = False,
) -> None:
    """Build the keypoint-match scene graph."""
    run_config = _setup(config, verbose, seed)
    cmd_scene_graph(run_config, out, scene, images or None)


def make_scene_command(
    out: str,
    scene: int = 0,
    spec: str = "",
    oracle: bool = False,
    seed: int = -1,
    config: str = "",
    verbose: bool = False,
) -> None:
    """Write a synthetic scene with ground-truth poses and depths."""
    run_config = _setup(config, verbose, seed)
    if spec:
        scene_spec = load_scene_spec(spec)
    elif oracle:
        scene_spec = oracle_scene_spec(
            scene,
            image_width=run_config.image_width,
            image_height=run_config.image_height,
            focal=run_config.focal,
        )
    else:
        scene_spec = run_config.scene_spec(scene)
    cmd_make_scene(scene_spec, out)


app = cli(
    name="dbarf",
    help="Bundle-adjusting generalizable neural rendering on synthetic desk scenes.",
)

config_opt = option(
    flags=["--config", "-c"],
    arg_type=str,
    default="",
    help="Run config YAML file (defaults apply when omitted)",
)
out_opt = option(
    flags=["--out", "-o"],
    arg_type=str,
    required=True,
    help="Output directory",
)
scene_opt = option(
    flags=["--scene", "-s"],
    arg_type=int,
    default=0,
    help="Scene seed (default: 0)",
)
seed_opt = option(
    flags=["--seed"],
    arg_type=int,
    default=-1,
    help="Run seed for weights, batches and sampling (default: the config's seed)",
)
checkpoint_opt = option(
    flags=["--checkpoint", "-k"],
    arg_type=str,
    required=True,
    help="Checkpoint file",
)
verbose_opt = option(
    flags=["--verbose", "-v"],
    arg_type=bool,
    default=False,
    help="Verbose output",
)

app.commands.append(
    command(
        name="pretrain",
        help="Jointly pretrain on the configured scenes.",
        callback=pretrain_command,
        options=[out_opt, seed_opt, config_opt, verbose_opt],
    )
)
app.commands.append(
    command(
        name="finetune",
        help="Fine-tune a checkpoint on one scene.",
        callback=finetune_command,
        options=[checkpoint_opt, out_opt, scene_opt, seed_opt, config_opt, verbose_opt],
    )
)
app.commands.append(
    command(
        name="evaluate",
        help="Evaluate a checkpoint on the held-out views of one scene.",
        callback=evaluate_command,
        options=[checkpoint_opt, out_opt, scene_opt, seed_opt, config_opt, verbose_opt],
    )
)
app.commands.append(
    command(
        name="render",
        help="Render one view of a scene.",
        callback=render_command,
        options=[
            checkpoint_opt,
            out_opt,
            option(
                flags=["--view"],
                arg_type=int,
                default=0,
                help="View index to render (default: 0)",
            ),
            scene_opt,
            seed_opt,
            config_opt,
            verbose_opt,
        ],
    )
)
app.commands.append(
    command(
        name="ba-lab",
        help="Compare direct, learned and positional-encoding pose refinement.",
        callback=ba_lab_command,
        options=[
            option(
                flags=["--mode", "-m"],
                arg_type=str,
                required=True,
                help="One of direct, dbarf, barf-pe",
            ),
            out_opt,
            option(
                flags=["--checkpoint", "-k"],
                arg_type=str,
                default="",
                help="Pretrained checkpoint (required for direct and dbarf)",
            ),
            scene_opt,
            seed_opt,
            config_opt,
            verbose_opt,
        ],
    )
)
app.commands.append(
    command(
        name="scene-graph",
        help="Build the scene graph of a synthetic scene or an image folder.",
        callback=scene_graph_command,
        options=[
            out_opt,
            scene_opt,
            option(
                flags=["--images", "-i"],
                arg_type=str,
                default="",
                help="Image folder with images/*.png instead of a synthetic scene",
            ),
            seed_opt,
            config_opt,
            verbose_opt,
        ],
    )
)
app.commands.append(
    command(
        name="make-scene",
        help="Write a synthetic scene with ground truth.",
        callback=make_scene_command,
        options=[
            out_opt,
            scene_opt,
            option(
                flags=["--spec"],
                arg_type=str,
                default="",
                help="Scene spec YAML file",
            ),
            option(
                flags=["--oracle"],
                arg_type=bool,
                default=False,
                help="Single backdrop plane with a band-limited texture",
            ),
            seed_opt,
            config_opt,
            verbose_opt,
        ],
    )
)


def main():
    app.run()


if __name__ == "__main__":
    main()
