"""Bar charts of experiment reports, rendered off-screen."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_report(rows: Sequence, path: Union[str, Path], title: str = "") -> Path:
    """Average translation (cm) and rotation (deg) error per grid cell, side by side."""
    path = Path(path)
    labels = [r.param for r in rows]
    t = [r.metrics.avg_translation for r in rows]
    r = [r.metrics.avg_rotation for r in rows]
    x = np.arange(len(rows))
    fig, axes = plt.subplots(1, 2, figsize=(max(6.0, 1.2 * len(rows) + 3), 3.2))
    for ax, vals, name, color in ((axes[0], t, "avg translation error (cm)", "tab:blue"), (axes[1], r, "avg rotation error (deg)", "tab:orange")):
        ax.bar(x, vals, color=color)
        ax.set_xticks(x, labels, rotation=30, ha="right")
        ax.set_ylabel(name)
        ax.grid(axis="y", alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
