"""Deterministic SVG figures for training curves and the rate sweep."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "adapam"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def sweep_figure(path, rows, title=""):
    """Reward decrease vs perturbation rate, one line per method, stderr error bars."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    methods = []
    for r in rows:
        if r.method not in methods:
            methods.append(r.method)
    for m in methods:
        pts = sorted((r.rate, r.mean_decrease, r.stderr_decrease) for r in rows if r.method == m)
        xs, ys, es = zip(*pts)
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=m)
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.set_xlabel("perturbation rate")
    ax.set_ylabel("reward decrease vs clean")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def curve_figure(path, rows, x, ys, title=""):
    """Line plot of selected columns of a training curve (list of dicts)."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    xs = [r[x] for r in rows]
    for y in ys:
        ax.plot(xs, [r.get(y, float("nan")) for r in rows], label=y)
    ax.set_xlabel(x)
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def bar_figure(path, labels, values, errors=None, ylabel="", title=""):
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    ax.bar(range(len(values)), values, yerr=errors, capsize=3, color="0.55")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=20, fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _save(fig, path)
