"""Plotting utilities for pose-error trajectories."""

import logging
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)


def plot_trajectories(
    df: pd.DataFrame,
    output_file: str = "trajectories.png",
    title: Optional[str] = None,
    column: str = "rot_err_deg",
) -> None:
    """Plot mean pose error against iteration, one curve per mode, and save it."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, group in df.groupby("mode"):
        curve = group.groupby("iteration")[column].mean()
        ax.plot(curve.index, curve.to_numpy(), label=str(mode))
    ax.set_xlabel("iteration")
    ax.set_ylabel("rotation error (deg)" if column == "rot_err_deg" else column)
    if title:
        ax.set_title(title)
    if not df.empty:
        ax.legend()
    fig.tight_layout()
    fig.savefig(output_file, dpi=100)
    plt.close(fig)
    logger.info(f"Plot saved to {output_file}")
