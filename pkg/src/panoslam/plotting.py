"""File-based figures for evaluation reports (no interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import Alignment, PairedPositions, residuals  # noqa: E402


def plot_alignment(pairs: PairedPositions, alignment: Alignment, path, title: str = "") -> None:
    """Top-down view of the aligned estimate over ground truth, plus the per-pose error.

    Args:
        pairs: Associated estimate/ground-truth positions.
        alignment: Transform that maps the estimate into the ground-truth frame.
        path: Output image file; the format follows its extension.
        title: Optional figure title.
    """
    est = alignment.apply(pairs.est)
    gt = np.asarray(pairs.gt, dtype=float)
    err = residuals(pairs, alignment)
    fig, (ax_xy, ax_err) = plt.subplots(1, 2, figsize=(11, 4.8), gridspec_kw={"width_ratios": [1, 1.3]})
    ax_xy.plot(gt[:, 0], gt[:, 1], color="0.3", lw=1.5, label="ground truth")
    ax_xy.plot(est[:, 0], est[:, 1], color="tab:red", lw=1.0, ls="--", label="estimate")
    ax_xy.set_aspect("equal", adjustable="datalim")
    ax_xy.set_xlabel("x [m]")
    ax_xy.set_ylabel("y [m]")
    ax_xy.legend(loc="best", fontsize=8)
    t = np.asarray(pairs.gt_times if pairs.gt_times is not None else np.arange(len(err)), dtype=float)
    ax_err.plot(t, err, color="tab:blue", lw=1.0)
    ax_err.axhline(float(np.sqrt(np.mean(err**2))), color="tab:blue", ls=":", lw=1.0, label="RMSE")
    ax_err.set_xlabel("time [s]")
    ax_err.set_ylabel("position error [m]")
    ax_err.legend(loc="best", fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
