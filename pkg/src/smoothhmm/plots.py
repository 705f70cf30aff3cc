"""Static SVG figures for fit reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_curves(bands: dict, grids: dict, path):
    """One panel per smooth: estimate with its pointwise band."""
    names = list(bands)
    n = max(len(names), 1)
    ncol = min(n, 3)
    nrow = int(np.ceil(n / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(4 * ncol, 3 * nrow), squeeze=False)
    for ax, name in zip(axes.flat, names):
        lo, est, hi = bands[name]
        key = name.split("|")[-1] if "|" in name else name.split(":")[-1].split("[")[0]
        x = grids[key]
        ax.fill_between(x, lo, hi, color="C0", alpha=0.25, lw=0)
        ax.plot(x, est, color="C0")
        ax.set_title(name, fontsize=9)
    for ax in list(axes.flat)[len(names):]:
        ax.set_visible(False)
    return _save(fig, path)


def plot_lambda_trace(trace, names, path):
    trace = np.asarray(trace, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for k in range(trace.shape[1]):
        ax.plot(np.arange(trace.shape[0]), trace[:, k], marker=".", label=names[k])
    ax.set_yscale("log")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("smoothing strength")
    if trace.shape[1]:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_series(x, states, path, label="observation"):
    """Observations coloured by decoded state (labels are 1-based)."""
    x = np.asarray(x, dtype=float)
    states = np.asarray(states)
    t = np.arange(1, x.size + 1)
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(t, x, color="0.8", lw=0.5, zorder=0)
    for s in np.unique(states):
        sel = states == s
        ax.scatter(t[sel], x[sel], s=3, color=f"C{(s - 1) % 10}", label=f"state {s}")
    ax.set_xlabel("time")
    ax.set_ylabel(label)
    ax.legend(fontsize=7, markerscale=3)
    return _save(fig, path)
