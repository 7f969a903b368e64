"""Figures written next to the CSV outputs (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def profiles(curves, path, title="", ylabel="u") -> Path:
    """1-D profiles; ``curves`` is a list of (label, x, y, style) tuples."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, x, y, style in curves:
        order = np.argsort(x)
        ax.plot(np.asarray(x)[order], np.asarray(y)[order], style, label=label, lw=1.2)
    ax.set_xlabel("x")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def heatmap(coords, values, path, title="") -> Path:
    """2-D field on a Cartesian slice (coords (n, 2), first coordinate fastest)."""
    xs = np.unique(coords[:, 0])
    ys = np.unique(coords[:, 1])
    img = np.asarray(values).reshape(len(ys), len(xs))
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    im = ax.imshow(img, origin="lower", extent=(xs[0], xs[-1], ys[0], ys[-1]), aspect="auto", cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("x_1")
    ax.set_ylabel("x_2")
    ax.set_title(title)
    return _save(fig, path)


def convergence(h, errors, budgets, path, slope=None) -> Path:
    fig, ax = plt.subplots(figsize=(5.2, 4.0))
    ax.loglog(h, errors, "o-", label="measured sup error" + (f" (slope {slope:.2f})" if slope is not None else ""))
    ax.loglog(h, budgets, "s--", label="error budget (unitless)")
    ax.set_xlabel("h")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    return _save(fig, path)
