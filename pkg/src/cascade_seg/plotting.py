"""Report figures written next to the evaluation CSV (Agg backend, no display)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def roc_figure(sweeps: dict[str, list[tuple]], path, l_min: int):
    """TPR against FPR per case, one marker per threshold."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        for case_id, rows in sweeps.items():
            arr = np.asarray(rows, dtype=float)
            ax.plot(arr[:, 2], arr[:, 1], marker=".", lw=1, label=case_id)
        ax.set_xlabel("region FPR (%)")
        ax.set_ylabel("region TPR (%)")
        ax.set_xlim(-2, 102)
        ax.set_ylim(-2, 102)
        ax.set_title(f"l_min = {l_min}")
        if len(sweeps) <= 10:
            ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def sweep_figure(t_grid, l_grid, mean_dsc: np.ndarray, path, best=None):
    """Mean DSC over the (t_bin, l_min) grid, one line per l_min."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.6))
        cmap = plt.get_cmap("viridis")
        for j, l in enumerate(l_grid):
            ax.plot(t_grid, mean_dsc[:, j], color=cmap(j / max(len(l_grid) - 1, 1)), lw=1,
                    label=f"l_min={l}" if j % 4 == 0 else None)
        if best is not None:
            ax.plot([best[0]], [best[2]], "k*", ms=9, label=f"best ({best[0]:.2f}, {best[1]})")
        ax.set_xlabel("t_bin")
        ax.set_ylabel("mean DSC (%)")
        ax.legend(frameon=False, fontsize=7)
        return _save(fig, path)


def volume_figure(seg_ml, gt_ml, path, r: float | None = None):
    """Estimated against manual lesion volume with the identity line."""
    seg_ml, gt_ml = np.asarray(seg_ml, float), np.asarray(gt_ml, float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.6))
        top = max(seg_ml.max(initial=0), gt_ml.max(initial=0)) * 1.05 or 1.0
        ax.plot([0, top], [0, top], color="0.6", lw=0.8, ls="--")
        ax.plot(gt_ml, seg_ml, "o", ms=4)
        ax.set_xlabel("manual volume (ml)")
        ax.set_ylabel("estimated volume (ml)")
        if r is not None:
            ax.set_title(f"Pearson r = {r:.3f}")
        return _save(fig, path)
