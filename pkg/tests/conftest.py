from __future__ import annotations

import numpy as np
import pytest

from echo_lens.traces import (
    AttentionDetail,
    AttentionDump,
    Correctness,
    DecodeParams,
    DetectionSource,
    DumpMode,
    EchoSpan,
    SegmentBoundaries,
    TraceRecord,
    TO_QUESTION,
    prefix_key,
)


def make_record(
    record_id="r1",
    tokens=("a", "b", "c", "d"),
    logprobs=(-1.0, -1.0, -2.0, -2.0),
    echo_end=2,
    rescored=(-3.5, -3.5),
    correctness=Correctness.CORRECT,
    question="What is 2+2?",
    gold="4",
):
    return TraceRecord(
        record_id=record_id,
        question=question,
        gold_answer=gold,
        trace_tokens=tuple(tokens),
        trace_logprobs=tuple(logprobs),
        correctness=correctness,
        echo_span=EchoSpan(end_token=echo_end, detection_source=DetectionSource.PROBE)
        if echo_end is not None
        else None,
        rescored_suffix_logprobs=tuple(rescored) if rescored is not None else None,
        model_name="fixture-lm",
        decode_params=DecodeParams(temperature=0.0, max_tokens=64, seed=7),
    )


@pytest.fixture
def gap_fixture_records():
    """Four hand-computed records; see test_likelihood for the arithmetic."""
    r1 = make_record("r1", ("a", "b", "c", "d"), (-1.0, -1.0, -2.0, -2.0), 2, (-3.5, -3.5))
    r2 = make_record("r2", ("a", "b"), (-1.0, -3.0), 1, (-3.5,))
    r3 = make_record(
        "r3", ("a", "b", "c"), (-2.0, -2.0, -2.0), 0, None, correctness=Correctness.WRONG
    )
    r4 = make_record(
        "r4", ("a", "b", "c", "d"), (0.0, -1.0, -1.0, -2.0), 2, None, correctness=Correctness.WRONG
    )
    return [r1, r2, r3, r4]


def make_dump(
    record_id="r1",
    n_layers=4,
    question_len=5,
    answer_len=4,
    summary=None,
    prefix_ranges=None,
    detail=None,
    mode=None,
):
    """Attention dump with consistent boundaries for a trace of answer_len tokens."""
    q = (0, question_len)
    a = (question_len, question_len + answer_len)
    if prefix_ranges is None:
        prefix_ranges = {"probe": (question_len, question_len + min(2, answer_len))}
    if summary is None:
        summary = {
            TO_QUESTION: np.full(n_layers, 0.1),
            prefix_key("probe"): np.full(n_layers, 0.2),
        }
    summary = {k: np.asarray(v, dtype=float) for k, v in summary.items()}
    if mode is None:
        mode = DumpMode.DETAIL if detail is not None else DumpMode.SUMMARY
    return AttentionDump(
        record_id=record_id,
        n_layers=n_layers,
        mode=mode,
        summary=summary,
        boundaries=SegmentBoundaries(question=q, answer=a, prefix=dict(prefix_ranges)),
        detail=detail,
    )


def make_detail(to_question, to_first):
    return AttentionDetail(
        to_question=np.asarray(to_question, dtype=float),
        to_first_positions=np.asarray(to_first, dtype=float),
    )
