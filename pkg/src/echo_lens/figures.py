"""Matplotlib renderings written next to the delimited report output.

PNG metadata is stripped so repeated runs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

GROUP_COLORS = {"Correct": "tab:blue", "Wrong": "tab:orange"}
_PNG_META = {"Software": None}  # drop the default creator tag for determinism


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def save_gap_figure(bins: Sequence, path: str | Path) -> Path:
    """Removed-length histogram next to per-bin mean gap curves."""
    fig, (ax_hist, ax_gap) = plt.subplots(1, 2, figsize=(10, 4))
    centers = [(b.lo + b.hi) / 2 for b in bins]
    widths = [0.4 * (b.hi - b.lo) for b in bins]
    ax_hist.bar(
        [c - w / 2 for c, w in zip(centers, widths)],
        [b.n_correct for b in bins],
        width=widths,
        color=GROUP_COLORS["Correct"],
        label="Correct",
    )
    ax_hist.bar(
        [c + w / 2 for c, w in zip(centers, widths)],
        [b.n_wrong for b in bins],
        width=widths,
        color=GROUP_COLORS["Wrong"],
        label="Wrong",
    )
    ax_hist.set_xlabel("removed echo-prefix tokens")
    ax_hist.set_ylabel("traces")
    ax_hist.legend()

    for group, key in (("Correct", "mean_delta_l_correct"), ("Wrong", "mean_delta_l_wrong")):
        points = [(c, getattr(b, key)) for c, b in zip(centers, bins) if getattr(b, key) is not None]
        if points:
            ax_gap.plot(*zip(*points), marker="o", color=GROUP_COLORS[group], label=group)
    ax_gap.axhline(0.0, color="gray", linewidth=0.8)
    ax_gap.set_xlabel("removed echo-prefix tokens (bin center)")
    ax_gap.set_ylabel("mean echo likelihood gap (nats/token)")
    ax_gap.legend()
    fig.tight_layout()
    return _save(fig, path)


def save_layer_figure(series_by_metric: Mapping[str, Mapping[str, object]], path: str | Path) -> Path:
    """Layer-wise attention curves per metric with standard-error bands."""
    metrics = sorted(series_by_metric)
    fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 4), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        for group, series in sorted(series_by_metric[metric].items()):
            if series.n == 0:
                continue
            layers = range(series.mean.size)
            color = GROUP_COLORS.get(group, "tab:gray")
            ax.plot(layers, series.mean, label=f"{group} (n={series.n})", color=color)
            ax.fill_between(
                layers, series.mean - series.sem, series.mean + series.sem, alpha=0.2, color=color
            )
        ax.set_title(metric)
        ax.set_xlabel("layer")
        ax.set_ylabel("mean attention fraction")
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)
