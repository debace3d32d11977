"""Report figures rendered to image files (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_energy_trace(report, path) -> Path:
    """Energy per evaluated iterate, one curve per annealing stage.

    Rejected Anderson iterates are drawn as red crosses; stage boundaries as
    dotted vertical lines.
    """
    fig, ax = plt.subplots(figsize=(7, 4))
    offset = 0
    for s, stage in enumerate(report.stages):
        recs = stage.iterations
        xs = offset + np.arange(len(recs))
        E = np.array([r.E for r in recs])
        ok = np.array([r.accepted for r in recs], dtype=bool)
        ax.plot(xs[ok], E[ok], "-o", ms=2.5, lw=1, label=f"ν_a={stage.nu_a:.3g}")
        if (~ok).any():
            ax.plot(xs[~ok], E[~ok], "x", color="red", ms=5)
        offset += len(recs)
        if s + 1 < len(report.stages):
            ax.axvline(offset - 0.5, color="grey", ls=":", lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("evaluated iterate")
    ax.set_ylabel("energy")
    if len(report.stages) <= 12:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_error_histogram(errors, path, unit: str = "") -> Path:
    errors = np.asarray(errors, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(errors, bins=min(50, max(5, errors.size // 10)), color="steelblue")
    rms = float(np.sqrt(np.mean(errors**2))) if errors.size else float("nan")
    ax.axvline(rms, color="red", lw=1, label=f"RMSE {rms:.3g}")
    ax.set_xlabel(f"per-vertex error{(' (' + unit + ')') if unit else ''}")
    ax.set_ylabel("vertices")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
