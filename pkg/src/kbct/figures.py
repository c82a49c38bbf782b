"""Report figures rendered next to the delimited output files."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def convergence_curve(series, path):
    """Validation MRR over epochs; ``series`` maps label -> [(epoch, mrr)]."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, points in series.items():
        pts = [(e, m) for e, m in points if np.isfinite(m)]
        if not pts:
            continue
        ax.plot([e for e, _ in pts], [m for _, m in pts],
                marker="o", markersize=3, linewidth=1.2, label=str(label))
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation MRR")
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=8)
    return _save(fig, path)


def metric_bars(rows, path, keys=("MRR", "H@1", "H@10")):
    """Grouped bars, one group per metric; ``rows`` is [(label, metrics)]."""
    keys = [k for k in keys if all(k in m for _, m in rows)]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(keys)), 4.0))
    width = 0.8 / max(1, len(rows))
    x = np.arange(len(keys))
    for i, (label, metrics) in enumerate(rows):
        vals = [metrics[k] for k in keys]
        ax.bar(x + i * width, vals, width, label=str(label))
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels(keys)
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    if len(rows) > 1:
        ax.legend(fontsize=8)
    return _save(fig, path)


def rank_diff_histogram(diffs, path, label="rank(original) - rank(twin)"):
    diffs = np.asarray(diffs, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    span = max(1.0, float(np.abs(diffs).max()) if diffs.size else 1.0)
    bins = np.linspace(-span, span, 21)
    ax.hist(diffs, bins=bins, edgecolor="black", linewidth=0.5)
    ax.axvline(0.0, color="black", linewidth=1)
    ax.set_xlabel(label)
    ax.set_ylabel("pairs")
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def grouped_condition_bars(rows, path, metric="MRR"):
    """Stereotype-style (condition, group, metrics) rows as grouped bars."""
    conditions = []
    groups = []
    for cond, group, _ in rows:
        if cond not in conditions:
            conditions.append(cond)
        if group not in groups:
            groups.append(group)
    fig, ax = plt.subplots(figsize=(max(5.0, 1.6 * len(conditions)), 4.0))
    width = 0.8 / max(1, len(groups))
    x = np.arange(len(conditions))
    lookup = {(c, g): m.get(metric) for c, g, m in rows}
    for i, g in enumerate(groups):
        vals = [lookup.get((c, g)) for c in conditions]
        xs = [xv + i * width for xv, v in zip(x, vals) if v is not None]
        ys = [v for v in vals if v is not None]
        ax.bar(xs, ys, width, label=g)
    ax.set_xticks(x + width * (len(groups) - 1) / 2)
    ax.set_xticklabels(conditions)
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)
