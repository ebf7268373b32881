"""Matplotlib figures for reports. Uses the object API (no pyplot state), so
figures can be rendered from worker threads."""
from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

matplotlib.rcParams["svg.hashsalt"] = "okdph"  # stable element ids in SVG output
matplotlib.rcParams["svg.fonttype"] = "path"  # glyphs as paths: no external font assets

_META = {"svg": {"Date": None}, "png": {}, "pdf": {"CreationDate": None}}


def save(fig: Figure, paths) -> None:
    for p in [paths] if isinstance(paths, (str, Path)) else paths:
        p = Path(p)
        fig.savefig(p, metadata=_META.get(p.suffix.lstrip("."), {}), dpi=120)


def plot_landscape(grid, rows, paths) -> None:
    """Filled loss contours with trajectory polylines and start/end markers.

    ``rows`` are (model, batch, u, v, residual) tuples, as written to the
    trajectories CSV.
    """
    fig = Figure(figsize=(6.4, 5.2))
    ax = fig.add_subplot()
    U, V = np.meshgrid(grid.us, grid.vs, indexing="ij")
    z = np.log10(np.maximum(grid.losses, 1e-12))
    finite = z[np.isfinite(z)]
    if finite.size and finite.max() > finite.min():
        levels = np.linspace(finite.min(), finite.max(), 16)
        cs = ax.contourf(U, V, np.ma.masked_invalid(z), levels=levels, cmap="viridis")
        fig.colorbar(cs, ax=ax, label="log10 training loss")
    tags = list(dict.fromkeys(r[0] for r in rows))
    colors = matplotlib.colormaps["tab10"]
    for k, tag in enumerate(tags):
        pts = np.array([(r[2], r[3]) for r in rows if r[0] == tag])
        ax.plot(pts[:, 0], pts[:, 1], "-", lw=1.4, color=colors(k % 10), label=tag)
        ax.plot(*pts[0], "o", ms=6, mfc="white", mec=colors(k % 10))
        ax.plot(*pts[-1], "*", ms=11, color=colors(k % 10))
        ax.annotate("start", pts[0], textcoords="offset points", xytext=(4, 4), fontsize=7)
        ax.annotate("end", pts[-1], textcoords="offset points", xytext=(4, -10), fontsize=7)
    f1, f2 = grid.plane.explained
    ax.set_xlabel(f"PC1 ({100 * f1:.1f}% var)")
    ax.set_ylabel(f"PC2 ({100 * f2:.1f}% var)")
    ax.set_xlim(grid.us[0], grid.us[-1])
    ax.set_ylim(grid.vs[0], grid.vs[-1])
    if tags:
        ax.legend(loc="upper right", fontsize=8)
    save(fig, paths)


def plot_metrics(metrics, paths, title: str = "") -> None:
    """Test accuracy per model against epoch."""
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.add_subplot()
    for tag in dict.fromkeys(r.model for r in metrics.rows):
        rows = metrics.for_model(tag)
        ax.plot([r.epoch for r in rows], [r.test_acc for r in rows], label=tag, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    save(fig, paths)


def plot_summary(labels, means, sds, paths, title: str = "", ylabel: str = "best test accuracy") -> None:
    """Bar chart of per-group means with one-sd error bars."""
    fig = Figure(figsize=(max(4.0, 1.1 * len(labels) + 2), 3.6))
    ax = fig.add_subplot()
    x = np.arange(len(labels))
    ax.bar(x, means, yerr=sds, capsize=4, color="#4c72b0")
    ax.set_xticks(x, [str(v) for v in labels])
    lo = min(m - s for m, s in zip(means, sds))
    hi = max(m + s for m, s in zip(means, sds))
    pad = max(hi - lo, 1e-3)
    ax.set_ylim(lo - pad, hi + 0.5 * pad)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    save(fig, paths)
