"""Report figures rendered to image files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import SUMMARY_ROWS  # noqa: E402

_META = {"Software": None}


def summary_bars(before: dict, after: dict, path) -> Path:
    keys = [k for k, _ in SUMMARY_ROWS]
    labels = [lab for _, lab in SUMMARY_ROWS]
    fig, axes = plt.subplots(1, len(keys), figsize=(2.2 * len(keys), 2.8))
    for ax, k, lab in zip(axes, keys, labels):
        ax.bar([0, 1], [before[k], after[k]], color=["#b0b0b0", "#3a7bd5"])
        ax.set_xticks([0, 1], ["before", "after"])
        ax.set_title(lab, fontsize=9)
        ax.tick_params(labelsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def per_frame(before: list, after: list, path, c_pd: float = 0.015, c_fe: float = 0.1) -> Path:
    """PD and FE per frame, before and after, with the plausibility thresholds."""
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 4.5), sharex=True)
    x = np.arange(len(before))
    a1.plot(x, [f.pd * 100 for f in before], "o-", color="#888888", label="before", ms=3)
    a1.plot(x, [f.pd * 100 for f in after], "o-", color="#3a7bd5", label="after", ms=3)
    a1.axhline(c_pd * 100, color="k", lw=0.8, ls="--")
    a1.set_ylabel("PD (cm)")
    a1.legend(fontsize=8)
    a2.plot(x, [f.fe for f in before], "o-", color="#888888", ms=3)
    a2.plot(x, [f.fe for f in after], "o-", color="#3a7bd5", ms=3)
    a2.axhline(c_fe, color="k", lw=0.8, ls="--")
    a2.set_ylabel("FE")
    a2.set_xlabel("frame")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path
