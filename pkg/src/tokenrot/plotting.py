"""Static figures for run reports and collapse diagnostics (PNG via Agg)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLLAPSE_METRICS = ("proj.cross_volume_cos", "proj.within_volume_cos", "proj.positive_cos")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_loss_curves(records: Mapping[str, object], path):
    """One training-loss curve per run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rec in records.items():
        steps = rec.steps
        if steps:
            ax.plot([e["step"] for e in steps], [e["loss"] for e in steps], label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if records:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_collapse(records: Mapping[str, object], path, metrics: Sequence[str] = COLLAPSE_METRICS):
    """Collapse metrics over training steps, one panel per metric."""
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.5), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        for name, rec in records.items():
            pts = rec.collapse(metric)
            if pts:
                ax.plot([p["step"] for p in pts], [p["value"] for p in pts], marker="o", ms=3,
                        label=name)
        ax.set_title(metric, fontsize=9)
        ax.set_xlabel("step")
    handles, labels = axes[0][0].get_legend_handles_labels()
    if handles:
        axes[0][0].legend(fontsize=7)
    return _save(fig, path)


def plot_sweep(curves: Mapping[str, Sequence[tuple]], x_label, y_label, path):
    """Metric against a swept value; ``curves`` maps a label to ``[(x, y), ...]``
    drawn in the given order."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, pts in curves.items():
        xs = [p[0] for p in pts]
        numeric = all(isinstance(x, (int, float)) for x in xs)
        pos = xs if numeric else list(range(len(xs)))
        ax.plot(pos, [p[1] for p in pts], marker="o", label=label)
        if not numeric:
            ax.set_xticks(pos, [str(x) for x in xs])
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    if curves:
        ax.legend(fontsize=7)
    return _save(fig, path)


def pca_2d(points):
    """Project rows of ``points`` onto their top two principal axes."""
    x = np.asarray(points, dtype=np.float64)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    out = x @ vt[:2].T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def plot_token_projection(tokens, path, title=""):
    """2-D PCA of token embeddings ``(B, M, P)``: colour = position, marker = volume."""
    tokens = np.asarray(tokens, dtype=np.float64)
    B, M, P = tokens.shape
    unit = tokens / np.maximum(np.linalg.norm(tokens, axis=-1, keepdims=True), 1e-12)
    xy = pca_2d(unit.reshape(B * M, P)).reshape(B, M, 2)
    markers = "os^vD<>ph*"
    fig, ax = plt.subplots(figsize=(5, 5))
    for b in range(B):
        sc = ax.scatter(xy[b, :, 0], xy[b, :, 1], c=np.arange(M), cmap="viridis", s=14,
                        marker=markers[b % len(markers)], vmin=0, vmax=max(M - 1, 1),
                        label=f"volume {b}")
    fig.colorbar(sc, ax=ax, label="token position")
    ax.set_title(title or "token embeddings (PCA)", fontsize=9)
    ax.legend(fontsize=7)
    return _save(fig, path)
