"""Figures written next to the CSV report."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport, ScoreSet  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# fixed metadata keeps the PNG bytes reproducible
_META = {"Software": None}


def plot_eer_grid(report: EvalReport, path, crop_length: int = None) -> Path:
    """EER versus test duration, one line per system."""
    path = Path(path)
    conds = np.array(report.conditions, dtype=float)
    x = conds / crop_length if crop_length else conds
    order = np.argsort(x)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        for name in report.systems:
            y = np.array([report.eer(name, c) for c in report.conditions])
            ax.plot(x[order], y[order], marker="o", label=name)
        ax.set_xlabel("test duration (fraction of crop)" if crop_length else "test duration (samples)")
        ax.set_ylabel("EER (%)")
        ax.set_ylim(bottom=0)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata=_META)
        plt.close(fig)
    return path


def plot_score_histograms(dumps: Dict[Tuple[str, int], ScoreSet], condition: int, path) -> Path:
    """Target/impostor score distributions per system at one duration."""
    path = Path(path)
    names = [name for name, c in dumps if c == condition]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names), figsize=(2.6 * len(names), 2.4), squeeze=False)
        bins = np.linspace(-1, 1, 41)
        for ax, name in zip(axes[0], names):
            s = dumps[(name, condition)]
            ax.hist(s.impostor_scores, bins=bins, alpha=0.6, label="impostor")
            ax.hist(s.target_scores, bins=bins, alpha=0.6, label="target")
            ax.set_title(name)
            ax.set_xlabel("cosine score")
        axes[0][0].legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata=_META)
        plt.close(fig)
    return path
