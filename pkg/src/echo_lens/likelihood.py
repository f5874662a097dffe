"""Echo likelihood metrics: per-record gaps, length stratification, group tables.

The headline quantity is the echo likelihood gap: the per-token average
log-likelihood of the raw (echo-containing) trace minus that of its
echo-trimmed counterpart. When the suffix has been rescored without the
echo in context the trimmed side uses those logprobs; otherwise it falls
back to the raw suffix logprobs and the result is flagged approximate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import (
    EmptySpan,
    EmptySuffix,
    MissingEchoSpan,
    MissingRescoring,
    NoRemovedTokens,
    OutOfBounds,
    UnlabeledRecord,
)
from .traces import Correctness, TraceRecord


def avg_log_likelihood(logprobs: Sequence[float], span: tuple[int, int]) -> float:
    """Arithmetic mean of per-token logprobs over a half-open span (nats/token)."""
    start, end = span
    if start < 0 or end > len(logprobs) or start > end:
        raise OutOfBounds(f"span [{start},{end}) outside 0..{len(logprobs)}")
    if start == end:
        raise EmptySpan(f"span [{start},{end}) is empty")
    return math.fsum(logprobs[start:end]) / (end - start)


@dataclass(frozen=True)
class GapResult:
    record_id: str
    delta_l: float
    removed_tokens: int
    loglik_raw: float
    loglik_trim: float
    approximate: bool
    delta_l_suffix: float | None = None
    delta_per_removed: float | None = None

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "delta_l": self.delta_l,
            "removed_tokens": self.removed_tokens,
            "loglik_raw": self.loglik_raw,
            "loglik_trim": self.loglik_trim,
            "approximate": self.approximate,
            "delta_l_suffix": self.delta_l_suffix,
            "delta_per_removed": self.delta_per_removed,
        }


def _trim_logprobs(record: TraceRecord) -> tuple[Sequence[float], bool]:
    """Logprobs standing in for the trimmed trace, plus the approximate flag."""
    removed = record.echo_span.n_tokens
    if record.rescored_suffix_logprobs is not None:
        return record.rescored_suffix_logprobs, False
    return record.trace_logprobs[removed:], True


def echo_likelihood_gap(record: TraceRecord) -> GapResult:
    """Per-token likelihood preference for the raw trace over its trimmed form.

    An empty echo span gives exactly zero: raw and trimmed traces are the
    same sequence, so no floating-point detour is taken.
    """
    if record.echo_span is None:
        raise MissingEchoSpan(f"record {record.record_id!r} has no echo span")
    t = record.n_tokens
    if t == 0:
        raise EmptySpan(f"record {record.record_id!r} has no trace tokens")
    loglik_raw = avg_log_likelihood(record.trace_logprobs, (0, t))
    removed = record.echo_span.n_tokens
    if removed == 0:
        return GapResult(
            record_id=record.record_id,
            delta_l=0.0,
            removed_tokens=0,
            loglik_raw=loglik_raw,
            loglik_trim=loglik_raw,
            approximate=False,
        )
    if removed == t:
        raise EmptySuffix(f"record {record.record_id!r}: echo span covers the whole trace")

    trim_lps, approximate = _trim_logprobs(record)
    loglik_trim = math.fsum(trim_lps) / len(trim_lps)
    suffix = None
    if not approximate:
        suffix = suffix_gap(record)
    return GapResult(
        record_id=record.record_id,
        delta_l=loglik_raw - loglik_trim,
        removed_tokens=removed,
        loglik_raw=loglik_raw,
        loglik_trim=loglik_trim,
        approximate=approximate,
        delta_l_suffix=suffix,
        delta_per_removed=delta_per_removed(record),
    )


def suffix_gap(record: TraceRecord) -> float:
    """Per-token suffix log-likelihood with the echo in context minus without."""
    if record.echo_span is None:
        raise MissingEchoSpan(f"record {record.record_id!r} has no echo span")
    if record.rescored_suffix_logprobs is None:
        raise MissingRescoring(f"record {record.record_id!r} has no rescored suffix")
    removed = record.echo_span.n_tokens
    if removed >= record.n_tokens:
        raise EmptySuffix(f"record {record.record_id!r} has no suffix tokens")
    with_echo = avg_log_likelihood(record.trace_logprobs, (removed, record.n_tokens))
    without_echo = math.fsum(record.rescored_suffix_logprobs) / len(record.rescored_suffix_logprobs)
    return with_echo - without_echo


def delta_per_removed(record: TraceRecord) -> float:
    """Total raw-minus-trimmed log-likelihood, normalized per removed token."""
    if record.echo_span is None:
        raise MissingEchoSpan(f"record {record.record_id!r} has no echo span")
    removed = record.echo_span.n_tokens
    if removed == 0:
        raise NoRemovedTokens(f"record {record.record_id!r} has an empty echo span")
    total_raw = math.fsum(record.trace_logprobs)
    trim_lps, _ = _trim_logprobs(record)
    return (total_raw - math.fsum(trim_lps)) / removed


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


def labels_from_records(records: Sequence[TraceRecord]) -> dict[str, Correctness]:
    return {r.record_id: r.correctness for r in records}


@dataclass(frozen=True)
class StratBin:
    lo: int
    hi: int  # exclusive
    n: int
    mean_delta_l: float
    n_correct: int
    n_wrong: int
    mean_delta_l_correct: float | None
    mean_delta_l_wrong: float | None
    merged: bool

    def to_dict(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "n": self.n,
            "mean_delta_l": self.mean_delta_l,
            "n_correct": self.n_correct,
            "n_wrong": self.n_wrong,
            "mean_delta_l_correct": self.mean_delta_l_correct,
            "mean_delta_l_wrong": self.mean_delta_l_wrong,
            "merged": self.merged,
        }


def stratify(
    results: Sequence[GapResult],
    labels: Mapping[str, Correctness] | None = None,
    bin_width: int = 10,
    min_bin_count: int = 5,
) -> list[StratBin]:
    """Histogram of removed-prefix lengths with per-bin mean gaps by group.

    Bins are ``bin_width`` tokens wide starting at zero. Populated bins with
    fewer than ``min_bin_count`` entries are merged into their left neighbor
    (the first bin merges rightward) and the receiving bin is flagged; a
    lone under-populated bin stays, flagged.
    """
    if not results:
        raise ValueError("results must be non-empty")
    if bin_width < 1:
        raise ValueError("bin_width must be >= 1")
    labels = labels or {}

    buckets: dict[int, list[GapResult]] = {}
    for res in results:
        buckets.setdefault(res.removed_tokens // bin_width, []).append(res)

    # (lo, hi, members, merged) in ascending bin order; empty bins carry no mass
    staged: list[list] = []
    pending: list[GapResult] = []
    pending_lo: int | None = None
    for idx in sorted(buckets):
        members = buckets[idx]
        lo, hi = idx * bin_width, (idx + 1) * bin_width
        if pending:
            members = pending + members
            lo = pending_lo if pending_lo is not None else lo
            pending, pending_lo = [], None
            merged = True
        else:
            merged = False
        if len(members) < min_bin_count:
            if staged:
                staged[-1][1] = hi
                staged[-1][2].extend(members)
                staged[-1][3] = True
            else:
                pending = list(members)
                pending_lo = lo
        else:
            staged.append([lo, hi, members, merged])
    if pending:
        if staged:
            staged[-1][1] = max(staged[-1][1], (max(buckets) + 1) * bin_width)
            staged[-1][2].extend(pending)
            staged[-1][3] = True
        else:
            staged.append([pending_lo, (max(buckets) + 1) * bin_width, pending, True])

    def mean(values: list[float]) -> float | None:
        return math.fsum(values) / len(values) if values else None

    bins = []
    for lo, hi, members, merged in staged:
        deltas = [m.delta_l for m in members]
        correct = [m.delta_l for m in members if labels.get(m.record_id) is Correctness.CORRECT]
        wrong = [m.delta_l for m in members if labels.get(m.record_id) is Correctness.WRONG]
        bins.append(
            StratBin(
                lo=lo,
                hi=hi,
                n=len(members),
                mean_delta_l=mean(deltas),
                n_correct=len(correct),
                n_wrong=len(wrong),
                mean_delta_l_correct=mean(correct),
                mean_delta_l_wrong=mean(wrong),
                merged=merged or len(members) < min_bin_count,
            )
        )
    return bins


@dataclass(frozen=True)
class GroupRow:
    n: int
    mean_delta_l: float | None
    std_delta_l: float | None
    negative_ratio_pct: float | None
    mean_delta_per_removed: float | None
    mean_suffix_gap: float | None
    mean_removed_tokens: float | None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mean_delta_l": self.mean_delta_l,
            "std_delta_l": self.std_delta_l,
            "negative_ratio_pct": self.negative_ratio_pct,
            "mean_delta_per_removed": self.mean_delta_per_removed,
            "mean_suffix_gap": self.mean_suffix_gap,
            "mean_removed_tokens": self.mean_removed_tokens,
        }


@dataclass(frozen=True)
class GroupGapReport:
    correct: GroupRow
    wrong: GroupRow

    def to_dict(self) -> dict:
        return {"Correct": self.correct.to_dict(), "Wrong": self.wrong.to_dict()}


def _group_row(group: list[GapResult]) -> GroupRow:
    n = len(group)
    if n == 0:
        return GroupRow(0, None, None, None, None, None, None)
    deltas = [g.delta_l for g in group]
    mean = math.fsum(deltas) / n
    std = math.sqrt(math.fsum((d - mean) ** 2 for d in deltas) / (n - 1)) if n > 1 else None
    dprs = [g.delta_per_removed for g in group if g.delta_per_removed is not None]
    sgs = [g.delta_l_suffix for g in group if g.delta_l_suffix is not None]
    return GroupRow(
        n=n,
        mean_delta_l=mean,
        std_delta_l=std,
        negative_ratio_pct=100.0 * sum(1 for d in deltas if d < 0.0) / n,
        mean_delta_per_removed=math.fsum(dprs) / len(dprs) if dprs else None,
        mean_suffix_gap=math.fsum(sgs) / len(sgs) if sgs else None,
        mean_removed_tokens=math.fsum(g.removed_tokens for g in group) / n,
    )


def group_report(
    results: Sequence[GapResult], labels: Mapping[str, Correctness]
) -> GroupGapReport:
    """Correct-vs-Wrong aggregate gap statistics (sample std, percent ratios)."""
    groups: dict[Correctness, list[GapResult]] = {
        Correctness.CORRECT: [],
        Correctness.WRONG: [],
    }
    for res in results:
        label = labels.get(res.record_id, Correctness.UNKNOWN)
        if label is Correctness.UNKNOWN:
            raise UnlabeledRecord(f"record {res.record_id!r} has no Correct/Wrong label")
        groups[label].append(res)
    return GroupGapReport(
        correct=_group_row(groups[Correctness.CORRECT]),
        wrong=_group_row(groups[Correctness.WRONG]),
    )


@dataclass(frozen=True)
class PresenceCell:
    n: int
    mean_attention: float | None

    def to_dict(self) -> dict:
        return {"n": self.n, "mean_attention": self.mean_attention}


@dataclass(frozen=True)
class PresenceReport:
    cells: Mapping[str, PresenceCell]  # keys: present/Correct, absent/Wrong, ...
    accuracy_present_pct: float | None
    accuracy_absent_pct: float | None

    def to_dict(self) -> dict:
        return {
            "cells": {k: c.to_dict() for k, c in self.cells.items()},
            "accuracy_present_pct": self.accuracy_present_pct,
            "accuracy_absent_pct": self.accuracy_absent_pct,
        }


def eop_presence_report(
    records: Sequence[TraceRecord],
    attention_by_record: Mapping[str, float] | None = None,
) -> PresenceReport:
    """Accuracy and optional mean attention split by echo presence and outcome.

    Presence means a non-empty echo span. ``attention_by_record`` supplies a
    per-record scalar (e.g. last-layer answer->prefix attention) to average
    within each cell.
    """
    attention_by_record = attention_by_record or {}
    cells: dict[str, list[TraceRecord]] = {
        "present/Correct": [],
        "present/Wrong": [],
        "absent/Correct": [],
        "absent/Wrong": [],
    }
    for record in records:
        if record.correctness is Correctness.UNKNOWN:
            raise UnlabeledRecord(f"record {record.record_id!r} has no Correct/Wrong label")
        presence = "present" if record.echo_span is not None and record.echo_span.n_tokens else "absent"
        cells[f"{presence}/{record.correctness.value}"].append(record)

    def cell_row(members: list[TraceRecord]) -> PresenceCell:
        values = [
            attention_by_record[m.record_id] for m in members if m.record_id in attention_by_record
        ]
        return PresenceCell(
            n=len(members),
            mean_attention=math.fsum(values) / len(values) if values else None,
        )

    def accuracy(presence: str) -> float | None:
        n_correct = len(cells[f"{presence}/Correct"])
        n_total = n_correct + len(cells[f"{presence}/Wrong"])
        return 100.0 * n_correct / n_total if n_total else None

    return PresenceReport(
        cells={key: cell_row(members) for key, members in cells.items()},
        accuracy_present_pct=accuracy("present"),
        accuracy_absent_pct=accuracy("absent"),
    )
