"""Plots for reports and training curves, written as deterministic SVG"""

import io

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402

HEADLINE_METRICS = ("win_rate", "accuracy_without_ties", "accuracy_with_ties")


def _save_svg(fig, path, config_hash):
    """Render to SVG with fixed element ids and no creation date"""
    buffer = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": str(config_hash), "svg.fonttype": "path"}):
        fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    return atomic_write_bytes(path, buffer.getvalue())


def headline_metric(report):
    for metric in HEADLINE_METRICS:
        if (report["metric"] == metric).any():
            return metric
    return report["metric"].iloc[0]


def plot_report(report, path, config_hash, metric=None):
    """One metric per dimension, one line series per setting

    Values are medians over seeds; error bars span the median confidence bounds
    where they exist. Each series is an SVG group with id ``series-<setting>``.
    """
    metric = metric or headline_metric(report)
    rows = report[report["metric"] == metric]
    settings = list(dict.fromkeys(rows["setting"]))
    dimensions = list(dict.fromkeys(rows["dimension"]))
    offset = 0.3/max(len(settings), 1)

    fig, ax = plt.subplots(figsize=(6, 3.6))
    for k, setting in enumerate(settings):
        subset = rows[rows["setting"] == setting].groupby("dimension", sort=False)
        median = subset["value"].median().reindex(dimensions)
        low = subset["ci_low"].median().reindex(dimensions)
        high = subset["ci_high"].median().reindex(dimensions)
        xs = [i + (k - (len(settings) - 1)/2)*offset for i in range(len(dimensions))]
        if high.notna().all():
            line = ax.errorbar(xs, median.values, fmt="o-", capsize=2, label=str(setting),
                               yerr=[median.values - low.values, high.values - median.values]).lines[0]
        else:
            line, = ax.plot(xs, median.values, "o-", label=str(setting))
        line.set_gid(f"series-{setting}")
    ax.set_xticks(range(len(dimensions)))
    ax.set_xticklabels(dimensions)
    if metric == "win_rate":
        ax.axhline(0.5, color="grey", linewidth=0.8, linestyle="--")
    ax.set_ylabel(metric)
    ax.set_title(f"{report['axis'].iloc[0]} (config {config_hash})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save_svg(fig, path, config_hash)


def plot_curve(curve, path, config_hash, column="loss"):
    """Training curve against step"""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    line, = ax.plot(curve["step"], curve[column])
    line.set_gid(f"series-{column}")
    ax.set_xlabel("step")
    ax.set_ylabel(column)
    fig.tight_layout()
    return _save_svg(fig, path, config_hash)
