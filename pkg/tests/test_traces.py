from __future__ import annotations

import json

import numpy as np
import pytest

from echo_lens.errors import MissingEchoSpan, SchemaError
from echo_lens.traces import (
    Correctness,
    DecodeParams,
    DumpMode,
    EchoSpan,
    TraceRecord,
    dump_to_dict,
    parse_attention_dump,
    parse_attention_dumps,
    parse_trace_file,
    record_to_dict,
    segment_map,
    serialize_attention_dumps,
    serialize_trace_records,
    validate_dump_pair,
)

from conftest import make_detail, make_dump, make_record


def test_parse_two_record_fixture(tmp_path, gap_fixture_records):
    path = tmp_path / "traces.jsonl"
    serialize_trace_records(gap_fixture_records[:2], path)
    records = parse_trace_file(path)
    assert len(records) == 2
    assert records[0] == gap_fixture_records[0]
    assert records[1].echo_span.n_tokens == 1


def test_parse_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    assert parse_trace_file(path) == []


def test_parse_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_trace_file(tmp_path / "nope.jsonl")


def test_length_mismatch_names_record(tmp_path):
    obj = record_to_dict(make_record("bad-rec"))
    obj["trace_logprobs"] = obj["trace_logprobs"][:-1]
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(obj) + "\n", encoding="utf-8")
    with pytest.raises(SchemaError) as err:
        parse_trace_file(path)
    assert "bad-rec" in str(err.value)
    assert err.value.line == 1


def test_parser_rejects_positive_logprob(tmp_path):
    obj = record_to_dict(make_record())
    obj["trace_logprobs"] = [0.5, -1.0, -1.0, -1.0]
    path = tmp_path / "pos.jsonl"
    path.write_text(json.dumps(obj) + "\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        parse_trace_file(path)


def test_parser_rejects_unknown_and_missing_fields(tmp_path):
    good = record_to_dict(make_record())
    bad_extra = dict(good, bogus=1)
    path = tmp_path / "extra.jsonl"
    path.write_text(json.dumps(bad_extra) + "\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        parse_trace_file(path)
    bad_missing = dict(good)
    del bad_missing["question"]
    path.write_text(json.dumps(bad_missing) + "\n", encoding="utf-8")
    with pytest.raises(SchemaError) as err:
        parse_trace_file(path)
    assert err.value.field == "question"


def test_malformed_json_line_number(tmp_path):
    path = tmp_path / "broken.jsonl"
    path.write_text(
        json.dumps(record_to_dict(make_record())) + "\n{not json\n", encoding="utf-8"
    )
    with pytest.raises(SchemaError) as err:
        parse_trace_file(path)
    assert err.value.line == 2


def test_round_trip_byte_identical(tmp_path, gap_fixture_records):
    first = tmp_path / "one.jsonl"
    second = tmp_path / "two.jsonl"
    serialize_trace_records(gap_fixture_records, first)
    serialize_trace_records(parse_trace_file(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_record_invariants():
    with pytest.raises(ValueError):
        TraceRecord(
            record_id="x",
            question="q",
            gold_answer="1",
            trace_tokens=("a",),
            trace_logprobs=(-1.0, -2.0),
        )
    with pytest.raises(ValueError):
        EchoSpan(end_token=2, start_token=1)
    with pytest.raises(ValueError):
        DecodeParams(temperature=-0.1)


# --- segment_map ----------------------------------------------------------


def test_segment_map_from_span():
    record = make_record(tokens=("t",) * 100, logprobs=(-1.0,) * 100, echo_end=30, rescored=None)
    seg = segment_map(record)
    assert seg.prefix == (0, 30)
    assert seg.suffix == (30, 100)
    assert seg.full_answer == (0, 100)


def test_segment_map_explicit_prefix_overrides():
    record = make_record(tokens=("t",) * 100, logprobs=(-1.0,) * 100, echo_end=30, rescored=None)
    seg = segment_map(record, prefix_len=32)
    assert seg.prefix == (0, 32)
    assert seg.suffix == (32, 100)


def test_segment_map_zero_prefix():
    record = make_record(echo_end=None, rescored=None)
    seg = segment_map(record, prefix_len=0)
    assert seg.prefix == (0, 0)
    assert seg.suffix == (0, 4)


def test_segment_map_partitions_indices():
    record = make_record(tokens=("t",) * 17, logprobs=(-0.5,) * 17, echo_end=5, rescored=None)
    for prefix_len in (None, 0, 3, 17):
        seg = segment_map(record, prefix_len=prefix_len)
        covered = set(range(*seg.prefix)) | set(range(*seg.suffix))
        assert covered == set(range(17))
        assert not (set(range(*seg.prefix)) & set(range(*seg.suffix)))


def test_segment_map_requires_span_or_length():
    record = make_record(echo_end=None, rescored=None)
    with pytest.raises(MissingEchoSpan):
        segment_map(record)


# --- attention dumps ------------------------------------------------------


def test_dump_round_trip(tmp_path):
    detail = make_detail(
        to_question=np.full((4, 4), 0.1),
        to_first=np.full((4, 4, 2), 0.05),
    )
    dumps = [make_dump("r1"), make_dump("r2", detail=detail)]
    path = tmp_path / "dumps.jsonl"
    serialize_attention_dumps(dumps, path)
    parsed = parse_attention_dumps(path)
    assert [d.record_id for d in parsed] == ["r1", "r2"]
    assert parsed[1].mode is DumpMode.DETAIL
    again = tmp_path / "again.jsonl"
    serialize_attention_dumps(parsed, again)
    assert path.read_bytes() == again.read_bytes()


def test_dump_directory_read(tmp_path):
    d = tmp_path / "dumps"
    d.mkdir()
    serialize_attention_dumps([make_dump("r1")], d / "a.jsonl")
    serialize_attention_dumps([make_dump("r2")], d / "b.jsonl")
    assert [x.record_id for x in parse_attention_dumps(d)] == ["r1", "r2"]


def test_dump_schema_errors():
    obj = dump_to_dict(make_dump())
    del obj["schema_version"]
    with pytest.raises(SchemaError):
        parse_attention_dump(obj)
    obj = dump_to_dict(make_dump())
    obj["summary"]["answer->question"] = [0.1]  # wrong layer count
    with pytest.raises(SchemaError):
        parse_attention_dump(obj)


def test_validate_matching_pair_is_clean():
    record = make_record()
    report = validate_dump_pair(record, make_dump("r1"))
    assert report.ok
    assert report.violations == ()


def test_validate_flags_out_of_range_value():
    summary = {
        "answer->question": np.full(4, 1.2),
        "answer->prefix:probe": np.full(4, 0.2),
    }
    report = validate_dump_pair(make_record(), make_dump("r1", summary=summary))
    assert any(v.code == "value_range" for v in report.violations)


def test_validate_flags_identity_mismatch():
    report = validate_dump_pair(make_record("r1"), make_dump("other"))
    assert any(v.code == "identity" for v in report.violations)


def test_validate_flags_boundary_and_mass():
    record = make_record()
    # answer range shorter than the trace
    report = validate_dump_pair(record, make_dump("r1", answer_len=3))
    assert any(v.code == "boundary" for v in report.violations)
    # combined disjoint-segment mean mass above 1
    summary = {
        "answer->question": np.full(4, 0.7),
        "answer->prefix:probe": np.full(4, 0.6),
    }
    report = validate_dump_pair(record, make_dump("r1", summary=summary))
    assert any(v.code == "mass" for v in report.violations)


def test_validate_checks_fixed_k_lengths():
    record = make_record()  # 4 trace tokens
    dump = make_dump(
        "r1",
        prefix_ranges={"probe": (5, 7), "k32": (5, 9)},  # k32 clipped to 4 tokens: ok
        summary={
            "answer->question": np.full(4, 0.1),
            "answer->prefix:probe": np.full(4, 0.2),
            "answer->prefix:k32": np.full(4, 0.3),
        },
    )
    assert validate_dump_pair(record, dump).ok
    bad = make_dump(
        "r1",
        prefix_ranges={"probe": (5, 7), "k32": (5, 8)},  # 3 tokens, expected min(32, 4)
        summary={
            "answer->question": np.full(4, 0.1),
            "answer->prefix:k32": np.full(4, 0.3),
        },
    )
    assert any(v.code == "boundary" for v in validate_dump_pair(record, bad).violations)


def test_correctness_enum_round_trip():
    for value in ("Correct", "Wrong", "Unknown"):
        assert Correctness(value).value == value
