"""
Static figures of an analysis run, written as SVG.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "shm-nonlin"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from shm.nonlin.gradstats import Moment  # noqa: E402

LABELS = {
    Moment.STD: "mean standard deviation",
    Moment.SKEWNESS: "mean skewness",
    Moment.KURTOSIS: "mean kurtosis",
    Moment.INVERSE_KURTOSIS: "mean inverse kurtosis",
}


def save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no creation date, so reruns write identical files
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)
    return path


def metric_lines(table, moment, dofs, path, threshold=None):
    """Per-floor metric and floor average across the roster.

    Args:
        table: Metric table (`gradstats.metric_table`)
        moment: Which metric
        dofs: Floors to draw
        path: Output file
        threshold: Optional detection threshold drawn as a horizontal line
    """
    moment = Moment(moment)
    states = list(table.index)
    x = np.arange(len(states))
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 3.5), sharey=False)
    for d in dofs:
        left.plot(x, table[f"{moment.value}_dof{d}"], marker="o", label=f"floor {d}")
    left.legend(frameon=False)
    right.plot(x, table[f"{moment.value}_mean"], marker="s", color="k", label="floor average")
    if threshold is not None:
        right.axhline(threshold, color="r", linestyle="--", linewidth=1, label="threshold")
    right.legend(frameon=False)
    for ax in (left, right):
        ax.set_xticks(x)
        ax.set_xticklabels(states, rotation=45, ha="right")
        ax.set_ylabel(LABELS[moment])
    return save(fig, path)


def std_heatmap(stats_by_state, path):
    """Per-column gradient standard deviation, one row per (state, floor).

    Args:
        stats_by_state: `{state: {floor: DistributionStats}}`
        path: Output file
    """
    rows, values = [], []
    columns = None
    for state, by_dof in stats_by_state.items():
        for d, s in sorted(by_dof.items()):
            rows.append(f"{state} / {d}")
            values.append(s.std)
            columns = [f"{c}@{k}" for c, k in s.column_labels]
    fig, ax = plt.subplots(figsize=(1 + 0.5 * len(columns), 1 + 0.25 * len(rows)))
    im = ax.imshow(np.array(values), aspect="auto", cmap="viridis")
    ax.set_xticks(np.arange(len(columns)))
    ax.set_xticklabels(columns, rotation=90)
    ax.set_yticks(np.arange(len(rows)))
    ax.set_yticklabels(rows)
    fig.colorbar(im, ax=ax, label="gradient standard deviation")
    return save(fig, path)


def kde_overlay(curves, path, title=""):
    """Density curves of several gradient columns on one axis.

    Args:
        curves: `{label: KdeCurve}`
        path: Output file
    """
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, c in curves.items():
        ax.plot(c.grid, c.density, label=label)
    ax.set_xlabel("gradient")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize="small")
    return save(fig, path)
