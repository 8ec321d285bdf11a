"""Figures written next to CLI reports (Agg backend, PNG files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

LOSS_KEYS = ("total", "patch", "dir", "gs", "feat", "rgb")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curves(records, path, keys=LOSS_KEYS) -> Path:
    """One panel per loss component found in ``records`` (dicts or LossReports)."""
    rows = [r if isinstance(r, dict) else vars(r) for r in records]
    keys = [k for k in keys if any(abs(float(r.get(k, 0.0))) > 0 for r in rows)] or ["total"]
    steps = np.array([r.get("step", i) for i, r in enumerate(rows)])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=(2.4 * len(keys), 2.2), squeeze=False)
        for ax, key in zip(axes[0], keys):
            ax.plot(steps, [float(r.get(key, 0.0)) for r in rows], lw=1.0)
            ax.set_title(key)
            ax.set_xlabel("step")
        fig.tight_layout()
        return _save(fig, path)


def plot_frames(frames, path, titles=None, max_frames: int = 8) -> Path:
    """Horizontal strip of HWC frames in [0, 1]."""
    frames = list(frames)[:max_frames]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(frames), figsize=(1.6 * len(frames), 1.8), squeeze=False)
        for k, (ax, f) in enumerate(zip(axes[0], frames)):
            ax.imshow(np.clip(np.asarray(f), 0.0, 1.0))
            ax.set_axis_off()
            if titles is not None:
                ax.set_title(str(titles[k]))
        fig.tight_layout()
        return _save(fig, path)


def plot_consistency(report: dict, path) -> Path:
    """Per-pair RMSE for the short and long strides of an evaluation report."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        for key, marker in (("short", "o"), ("long", "s")):
            pairs = report.get(f"pairs_{key}") or []
            if pairs:
                ax.plot([p["j"] for p in pairs], [p["rmse"] for p in pairs], marker=marker, lw=1.0,
                        ms=3, label=f"{key} (mean {report[f'rmse_{key}']:.4f})")
        ax.set_xlabel("frame index")
        ax.set_ylabel("RMSE")
        ax.set_title(f"clip score {report.get('clip_score', float('nan')):.4f}")
        if ax.lines:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
