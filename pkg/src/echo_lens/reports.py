"""Deterministic report emission: canonical JSON and fixed-format CSV.

Running the same pipeline twice over the same inputs must produce
byte-identical files: keys are sorted, column order is fixed, and floats are
printed with a fixed number of decimals (Python's float formatting rounds
ties to even).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

FLOAT_DECIMALS = 6


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj), encoding="utf-8")
    return path


def fmt(value, decimals: int = FLOAT_DECIMALS) -> str:
    """Fixed-decimal rendering; None becomes the empty cell."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.{decimals}f}"
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


BIN_COLUMNS = (
    "lo",
    "hi",
    "n",
    "n_correct",
    "n_wrong",
    "mean_delta_l",
    "mean_delta_l_correct",
    "mean_delta_l_wrong",
    "merged",
)


def bin_rows(bins) -> list[tuple]:
    return [
        (
            b.lo,
            b.hi,
            b.n,
            b.n_correct,
            b.n_wrong,
            b.mean_delta_l,
            b.mean_delta_l_correct,
            b.mean_delta_l_wrong,
            b.merged,
        )
        for b in bins
    ]


LAYER_COLUMNS = ("layer", "metric", "group", "mean", "sem")


def layer_rows(series_by_metric) -> list[tuple]:
    """Flatten layer series into (layer, metric, group, mean, sem) rows."""
    rows = []
    for metric in sorted(series_by_metric):
        per_group = series_by_metric[metric]
        for group in sorted(per_group):
            series = per_group[group]
            for layer in range(series.mean.size):
                rows.append(
                    (layer, metric, group, float(series.mean[layer]), float(series.sem[layer]))
                )
    return rows
