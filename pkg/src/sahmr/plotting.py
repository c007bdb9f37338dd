"""Report figures (matplotlib, file output only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PANELS = (("g_mpjpe", "G-MPJPE (mm)"), ("mpve", "MPVE (mm)"), ("cerr", "CErr (mm)"), ("pen_e", "PenE (m)"))


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_summary(reports: dict, path):
    """Bar chart of the aggregate metrics, one bar per variant."""
    names = list(reports)
    agg = [reports[n].aggregate() for n in names]
    fig, axes = plt.subplots(1, len(_PANELS), figsize=(4 * len(_PANELS), 3.6))
    x = np.arange(len(names))
    for ax, (key, label) in zip(axes, _PANELS):
        ax.bar(x, [a[key] for a in agg], color="tab:blue")
        ax.set_xticks(x, names, rotation=40, ha="right", fontsize=8)
        ax.set_title(label, fontsize=10)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_trace(trace, path, title="scene-aware fit"):
    """Total and per-term energy against iteration on a log scale."""
    it = [r["iteration"] for r in trace]
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for key in ("total", "reproj", "pen", "contact", "ordinal"):
        vals = np.array([r[key] for r in trace], dtype=float)
        if np.any(vals > 0):
            ax.semilogy(it, np.maximum(vals, 1e-16), label=key, lw=2 if key == "total" else 1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("energy")
    ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_history(history, path, title="training loss"):
    keys = [k for k in history[0] if k != "total"] if history else []
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for k in keys:
        ax.semilogy([h[k] for h in history], label=k, lw=1)
    ax.set_xlabel("step")
    ax.set_title(title, fontsize=10)
    if keys:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
