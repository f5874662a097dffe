"""Block attention metrics, layer-wise refocusing curves, and significance tests.

Production paths read precomputed per-layer summaries from attention dumps;
``block_attention`` exists to verify extractors against the definition: the
mean over query rows of the total mass landing in a key segment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import stats
from .errors import (
    DegenerateVariance,
    EmptyQuerySet,
    IndexOutOfRange,
    MissingBoundaryConfig,
    MissingDetailMode,
    MissingGroup,
    SingleClass,
    UnlabeledRecord,
)
from .traces import TO_QUESTION, AttentionDump, Correctness, prefix_key

METRIC_TO_QUESTION = "answer->question"
METRIC_TO_PREFIX = "answer->prefix"


def summary_key(metric: str, prefix_mode: str | int = "probe") -> str:
    if metric == METRIC_TO_QUESTION:
        return TO_QUESTION
    if metric == METRIC_TO_PREFIX:
        return prefix_key(prefix_mode)
    raise ValueError(f"unknown metric {metric!r}")


def block_attention(matrix, query_idx, key_idx) -> float:
    """Mean over queries of summed attention mass to the key set.

    ``matrix`` is one layer's row-stochastic (head-averaged) attention.
    """
    a = np.asarray(matrix, dtype=float)
    q = np.asarray(query_idx, dtype=int)
    k = np.asarray(key_idx, dtype=int)
    if q.size == 0:
        raise EmptyQuerySet("need at least one query index")
    t = a.shape[0]
    for idx in (q, k):
        if idx.size and (idx.min() < 0 or idx.max() >= t):
            raise IndexOutOfRange(f"indices outside 0..{t - 1}")
    if k.size == 0:
        return 0.0
    return float(a[np.ix_(q, k)].sum() / q.size)


@dataclass(frozen=True)
class LayerGroups:
    """Inclusive layer ranges; must be ordered, disjoint, and covering."""

    early: tuple[int, int] = (0, 6)
    mid: tuple[int, int] = (7, 18)
    late: tuple[int, int] = (19, 31)

    def __post_init__(self):
        lo = 0
        for name, (start, end) in self.ranges().items():
            if start != lo or end < start:
                raise ValueError(f"layer group {name!r} breaks the ordered partition")
            lo = end + 1

    def ranges(self) -> dict[str, tuple[int, int]]:
        return {"early": self.early, "mid": self.mid, "late": self.late}

    @property
    def n_layers(self) -> int:
        return self.late[1] + 1

    @classmethod
    def for_layers(cls, n_layers: int) -> "LayerGroups":
        """Rescale the default 32-layer split (0-6 / 7-18 / 19-31) to n layers."""
        if n_layers < 3:
            raise ValueError("need at least 3 layers to form groups")
        if n_layers == 32:
            return cls()
        early_end = max(0, round(n_layers * 7 / 32) - 1)
        mid_end = max(early_end + 1, round(n_layers * 19 / 32) - 1)
        mid_end = min(mid_end, n_layers - 2)
        return cls(early=(0, early_end), mid=(early_end + 1, mid_end), late=(mid_end + 1, n_layers - 1))


def metric_matrix(
    dumps: Sequence[AttentionDump],
    labels: Mapping[str, Correctness],
    metric: str,
    prefix_mode: str | int = "probe",
) -> dict[Correctness, np.ndarray]:
    """Per-sample per-layer values for one metric, split by outcome group."""
    key = summary_key(metric, prefix_mode)
    rows: dict[Correctness, list[np.ndarray]] = {Correctness.CORRECT: [], Correctness.WRONG: []}
    n_layers = None
    for dump in dumps:
        if key not in dump.summary:
            raise MissingBoundaryConfig(
                f"dump {dump.record_id!r} lacks summary series {key!r}"
            )
        label = labels.get(dump.record_id, Correctness.UNKNOWN)
        if label is Correctness.UNKNOWN:
            raise UnlabeledRecord(f"dump {dump.record_id!r} has no Correct/Wrong label")
        series = dump.summary[key]
        if n_layers is None:
            n_layers = series.size
        elif series.size != n_layers:
            raise ValueError("dumps disagree on layer count")
        rows[label].append(series)
    return {
        group: np.vstack(items) if items else np.empty((0, n_layers or 0))
        for group, items in rows.items()
    }


@dataclass(frozen=True)
class LayerMetricSeries:
    metric: str
    prefix_mode: str
    group: Correctness
    n: int
    mean: np.ndarray  # per layer
    sem: np.ndarray  # per layer


def layer_series(
    dumps: Sequence[AttentionDump],
    labels: Mapping[str, Correctness],
    metric: str,
    prefix_mode: str | int = "probe",
) -> dict[str, LayerMetricSeries]:
    """Per-group layer curves: mean with standard error across samples."""
    matrices = metric_matrix(dumps, labels, metric, prefix_mode)
    out = {}
    for group, matrix in matrices.items():
        n = matrix.shape[0]
        if n >= 2:
            sem = matrix.std(axis=0, ddof=1) / np.sqrt(n)
        else:
            sem = np.zeros(matrix.shape[1])
        mean = matrix.mean(axis=0) if n else np.full(matrix.shape[1], np.nan)
        out[group.value] = LayerMetricSeries(
            metric=metric,
            prefix_mode=str(prefix_mode),
            group=group,
            n=n,
            mean=mean,
            sem=sem,
        )
    return out


@dataclass(frozen=True)
class GapTableRow:
    correct_pct: float
    wrong_pct: float
    diff_pp: float

    def to_dict(self) -> dict:
        return {
            "correct_pct": self.correct_pct,
            "wrong_pct": self.wrong_pct,
            "diff_pp": self.diff_pp,
        }


def gap_table(
    series_by_metric: Mapping[str, Mapping[str, LayerMetricSeries]],
    groups: LayerGroups | None = None,
) -> dict[str, dict[str, GapTableRow]]:
    """Aggregate attention table: last layer, all-layer mean, and mid layers.

    Values are percentages; the diff column is Correct minus Wrong in
    percentage points.
    """
    out: dict[str, dict[str, GapTableRow]] = {}
    for metric, per_group in series_by_metric.items():
        correct = per_group.get(Correctness.CORRECT.value)
        wrong = per_group.get(Correctness.WRONG.value)
        if correct is None or wrong is None or correct.n == 0 or wrong.n == 0:
            raise MissingGroup(f"metric {metric!r} needs both Correct and Wrong samples")
        n_layers = correct.mean.size
        grouping = groups or LayerGroups.for_layers(n_layers)
        mid_lo, mid_hi = grouping.mid
        if mid_hi >= n_layers:
            raise ValueError("layer grouping exceeds dump layer count")
        stats_rows = {
            "last_layer": (correct.mean[-1], wrong.mean[-1]),
            "all_layers_mean": (correct.mean.mean(), wrong.mean.mean()),
            f"layers_{mid_lo}_{mid_hi}": (
                correct.mean[mid_lo : mid_hi + 1].mean(),
                wrong.mean[mid_lo : mid_hi + 1].mean(),
            ),
        }
        out[metric] = {
            name: GapTableRow(
                correct_pct=100.0 * c,
                wrong_pct=100.0 * w,
                diff_pp=100.0 * (c - w),
            )
            for name, (c, w) in stats_rows.items()
        }
    return out


@dataclass(frozen=True)
class GroupDiscriminability:
    auc: float
    cohens_d: float

    def to_dict(self) -> dict:
        return {"auc": self.auc, "cohens_d": self.cohens_d}


def discriminability(
    scores_correct: np.ndarray,
    scores_wrong: np.ndarray,
    groups: LayerGroups | None = None,
) -> dict[str, GroupDiscriminability]:
    """AUC and effect size of Correct-vs-Wrong per layer group.

    Per-layer scores are averaged within each group per sample first, then
    compared across outcome classes.
    """
    scores_correct = np.asarray(scores_correct, dtype=float)
    scores_wrong = np.asarray(scores_wrong, dtype=float)
    if scores_correct.shape[0] == 0 or scores_wrong.shape[0] == 0:
        raise SingleClass("need samples in both outcome classes")
    n_layers = scores_correct.shape[1]
    grouping = groups or LayerGroups.for_layers(n_layers)
    out = {}
    for name, (lo, hi) in grouping.ranges().items():
        if hi >= n_layers:
            raise ValueError("layer grouping exceeds score layer count")
        c = scores_correct[:, lo : hi + 1].mean(axis=1)
        w = scores_wrong[:, lo : hi + 1].mean(axis=1)
        out[name] = GroupDiscriminability(
            auc=stats.auroc(c, w),
            cohens_d=stats.cohens_d(c, w),
        )
    return out


@dataclass(frozen=True)
class PositionStat:
    position: int
    mean_correct: float
    mean_wrong: float
    t: float
    dof: float
    p: float

    def to_dict(self) -> dict:
        return {
            "position": self.position,
            "mean_correct": self.mean_correct,
            "mean_wrong": self.mean_wrong,
            "t": self.t,
            "dof": self.dof,
            "p": self.p,
        }


def _detail_position_values(dump: AttentionDump, target: str, position: int) -> float | None:
    """Layer-averaged attention of answer token ``position`` to the target segment."""
    detail = dump.detail
    if detail is None:
        raise MissingDetailMode(f"dump {dump.record_id!r} has no detail arrays")
    if position >= detail.to_question.shape[1]:
        return None
    if target == "question":
        return float(detail.to_question[:, position].mean())
    if target == "prefix":
        probe = dump.boundaries.prefix.get("probe")
        if probe is None:
            raise MissingBoundaryConfig(f"dump {dump.record_id!r} lacks a probe prefix range")
        cols = min(probe[1] - probe[0], detail.to_first_positions.shape[2])
        return float(detail.to_first_positions[:, position, :cols].sum(axis=1).mean())
    raise ValueError(f"unknown target {target!r}")


def tokenwise_significance(
    dumps: Sequence[AttentionDump],
    labels: Mapping[str, Correctness],
    target: str = "prefix",
    max_positions: int = 32,
    alpha: float = 0.05,
) -> tuple[list[PositionStat], int]:
    """Per-position Welch test of Correct vs Wrong attention to a segment.

    Returns the per-position statistics and the count of positions with
    p below ``alpha``.
    """
    rows = []
    for position in range(max_positions):
        values: dict[Correctness, list[float]] = {Correctness.CORRECT: [], Correctness.WRONG: []}
        for dump in dumps:
            label = labels.get(dump.record_id, Correctness.UNKNOWN)
            if label is Correctness.UNKNOWN:
                raise UnlabeledRecord(f"dump {dump.record_id!r} has no Correct/Wrong label")
            value = _detail_position_values(dump, target, position)
            if value is not None:
                values[label].append(value)
        correct, wrong = values[Correctness.CORRECT], values[Correctness.WRONG]
        if not correct and not wrong:
            continue
        result = stats.welch_t(correct, wrong)
        rows.append(
            PositionStat(
                position=position,
                mean_correct=float(np.mean(correct)),
                mean_wrong=float(np.mean(wrong)),
                t=result.t,
                dof=result.dof,
                p=result.p,
            )
        )
    n_significant = sum(1 for r in rows if r.p < alpha)
    return rows, n_significant


@dataclass(frozen=True)
class WordScore:
    word_index: int
    score: float
    raw_mass: float

    def to_dict(self) -> dict:
        return {"word_index": self.word_index, "score": self.score, "raw_mass": self.raw_mass}


def word_heatmap(
    dump: AttentionDump,
    word_of_token: Sequence[int],
    groups: LayerGroups | None = None,
) -> list[WordScore]:
    """Word-level received attention over the echo prefix, max-normalized.

    A word's raw mass is the sum over its tokens of the mid-layer mean
    attention received from all answer tokens. Only prefix token columns
    present in the detail arrays (the first 32 positions) contribute.
    """
    if dump.detail is None:
        raise MissingDetailMode(f"dump {dump.record_id!r} has no detail arrays")
    probe = dump.boundaries.prefix.get("probe")
    if probe is None:
        raise MissingBoundaryConfig(f"dump {dump.record_id!r} lacks a probe prefix range")
    to_first = dump.detail.to_first_positions
    n_layers = to_first.shape[0]
    grouping = groups or LayerGroups.for_layers(n_layers)
    lo, hi = grouping.mid
    cols = min(probe[1] - probe[0], to_first.shape[2], len(word_of_token))
    if cols == 0:
        return []
    # mean over mid layers and over query tokens -> received mass per key column
    received = to_first[lo : hi + 1, :, :cols].mean(axis=(0, 1))
    masses: dict[int, float] = {}
    for token_idx in range(cols):
        word = int(word_of_token[token_idx])
        masses[word] = masses.get(word, 0.0) + float(received[token_idx])
    peak = max(masses.values())
    return [
        WordScore(word_index=w, raw_mass=m, score=(m / peak if peak > 0 else 0.0))
        for w, m in sorted(masses.items())
    ]


@dataclass(frozen=True)
class LayerEffect:
    layer: int
    raw_diff: float
    cohens_d: float | None
    sign_flip: bool

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "raw_diff": self.raw_diff,
            "cohens_d": self.cohens_d,
            "sign_flip": self.sign_flip,
        }


def normalization_check(
    scores_correct: np.ndarray, scores_wrong: np.ndarray
) -> list[LayerEffect]:
    """Per-layer raw group difference next to its standardized effect size.

    Flags layers where the two disagree in sign, which would indicate the
    raw gap is an artifact of layer-specific variance.
    """
    scores_correct = np.asarray(scores_correct, dtype=float)
    scores_wrong = np.asarray(scores_wrong, dtype=float)
    if scores_correct.shape[0] == 0 or scores_wrong.shape[0] == 0:
        raise SingleClass("need samples in both outcome classes")
    rows = []
    for layer in range(scores_correct.shape[1]):
        c = scores_correct[:, layer]
        w = scores_wrong[:, layer]
        raw_diff = float(c.mean() - w.mean())
        try:
            d = stats.cohens_d(c, w)
        except DegenerateVariance:
            d = None
        flip = d is not None and raw_diff * d < 0.0
        rows.append(LayerEffect(layer=layer, raw_diff=raw_diff, cohens_d=d, sign_flip=flip))
    return rows
