"""On-disk and in-memory representation of reasoning traces and attention dumps.

Trace files are UTF-8 JSONL, one record per line, ``schema_version: 1``.
Attention sidecars hold one JSON object per record (JSONL file or a directory
of such files) with layer-major arrays, keyed back to traces by ``record_id``.
All types are immutable after parse and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import MissingEchoSpan, SchemaError

SCHEMA_VERSION = 1

# Summary-map metric keys. Prefix candidates are keyed by mode: the
# probe-estimated span or a fixed length K.
TO_QUESTION = "answer->question"


def prefix_key(mode: str | int) -> str:
    """Summary key for an answer->prefix metric ('probe' or a fixed K)."""
    if mode == "probe":
        return "answer->prefix:probe"
    return f"answer->prefix:k{int(mode)}"


class Correctness(str, Enum):
    CORRECT = "Correct"
    WRONG = "Wrong"
    UNKNOWN = "Unknown"


class DetectionSource(str, Enum):
    PROBE = "Probe"
    ANNOTATION = "Annotation"
    NONE = "None"


class DumpMode(str, Enum):
    SUMMARY = "Summary"
    DETAIL = "Detail"


@dataclass(frozen=True)
class EchoSpan:
    """Detected echo token range; always anchored at trace index 0."""

    end_token: int
    detection_source: DetectionSource = DetectionSource.NONE
    start_token: int = 0

    def __post_init__(self):
        if self.start_token != 0:
            raise ValueError("echo span must start at token 0")
        if self.end_token < self.start_token:
            raise ValueError("echo span end before start")

    @property
    def n_tokens(self) -> int:
        return self.end_token - self.start_token


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class TraceRecord:
    """One prompt plus its generated reasoning trace, teacher-force scored."""

    record_id: str
    question: str
    gold_answer: str
    trace_tokens: tuple[str, ...]
    trace_logprobs: tuple[float, ...]
    correctness: Correctness = Correctness.UNKNOWN
    echo_span: EchoSpan | None = None
    rescored_suffix_logprobs: tuple[float, ...] | None = None
    model_name: str = ""
    decode_params: DecodeParams = field(default_factory=DecodeParams)

    def __post_init__(self):
        if len(self.trace_logprobs) != len(self.trace_tokens):
            raise ValueError(
                f"record {self.record_id!r}: {len(self.trace_logprobs)} logprobs "
                f"for {len(self.trace_tokens)} tokens"
            )
        for lp in self.trace_logprobs:
            if not (lp <= 0.0):  # also rejects NaN
                raise ValueError(f"record {self.record_id!r}: positive or non-finite logprob {lp}")
        if self.echo_span is not None and self.echo_span.end_token > len(self.trace_tokens):
            raise ValueError(f"record {self.record_id!r}: echo span exceeds trace length")
        if self.rescored_suffix_logprobs is not None:
            if self.echo_span is None:
                raise ValueError(f"record {self.record_id!r}: rescored suffix without echo span")
            expected = len(self.trace_tokens) - self.echo_span.n_tokens
            if len(self.rescored_suffix_logprobs) != expected:
                raise ValueError(
                    f"record {self.record_id!r}: rescored suffix length "
                    f"{len(self.rescored_suffix_logprobs)} != {expected}"
                )
            for lp in self.rescored_suffix_logprobs:
                if not (lp <= 0.0):
                    raise ValueError(f"record {self.record_id!r}: positive rescored logprob {lp}")

    @property
    def n_tokens(self) -> int:
        return len(self.trace_tokens)


@dataclass(frozen=True)
class SegmentMap:
    """Token index ranges over the trace axis; half-open [start, end).

    The question is not part of the trace token axis, so only its token
    count is carried (when known, e.g. from an attention dump).
    """

    prefix: tuple[int, int]
    suffix: tuple[int, int]
    full_answer: tuple[int, int]
    question_tokens: int | None = None


@dataclass(frozen=True)
class SegmentBoundaries:
    """Absolute token ranges over the full scored sequence (question + trace)."""

    question: tuple[int, int]
    answer: tuple[int, int]
    prefix: Mapping[str, tuple[int, int]]  # keys: 'probe', 'k32', ...


@dataclass(frozen=True)
class AttentionDetail:
    """Per-layer, per-answer-token attention masses.

    ``to_question``: [n_layers, n_answer_tokens] mass to the question segment.
    ``to_first_positions``: [n_layers, n_answer_tokens, C] mass to each of the
    first C (<= 32) answer-token positions individually.
    """

    to_question: np.ndarray
    to_first_positions: np.ndarray


@dataclass(frozen=True)
class AttentionDump:
    record_id: str
    n_layers: int
    mode: DumpMode
    summary: Mapping[str, np.ndarray]  # metric key -> per-layer values
    boundaries: SegmentBoundaries
    detail: AttentionDetail | None = None


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    record_id: str
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


# --------------------------------------------------------------------------
# trace file parsing / serialization
# --------------------------------------------------------------------------

_TRACE_KEYS = {
    "schema_version",
    "record_id",
    "question",
    "gold_answer",
    "trace_tokens",
    "trace_logprobs",
    "correctness",
    "echo_span",
    "rescored_suffix_logprobs",
    "model_name",
    "decode_params",
}


def _require(obj: dict, key: str, types, line: int):
    if key not in obj:
        raise SchemaError("missing field", line=line, field=key)
    value = obj[key]
    if not isinstance(value, types):
        raise SchemaError(f"ill-typed value {value!r}", line=line, field=key)
    return value


def _float_list(obj: dict, key: str, line: int) -> tuple[float, ...]:
    raw = _require(obj, key, list, line)
    out = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"non-numeric entry {v!r}", line=line, field=key)
        out.append(float(v))
    return tuple(out)


def _parse_record(obj: dict, line: int) -> TraceRecord:
    unknown = set(obj) - _TRACE_KEYS
    if unknown:
        raise SchemaError(f"unknown fields {sorted(unknown)}", line=line, field=sorted(unknown)[0])
    version = _require(obj, "schema_version", int, line)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version}", line=line, field="schema_version")
    record_id = _require(obj, "record_id", str, line)

    span = None
    raw_span = obj.get("echo_span")
    if raw_span is not None:
        if not isinstance(raw_span, dict):
            raise SchemaError("echo_span must be object or null", line=line, field="echo_span")
        try:
            span = EchoSpan(
                start_token=_require(raw_span, "start_token", int, line),
                end_token=_require(raw_span, "end_token", int, line),
                detection_source=DetectionSource(_require(raw_span, "detection_source", str, line)),
            )
        except ValueError as exc:
            raise SchemaError(str(exc), line=line, field="echo_span") from exc
        if raw_span.get("n_tokens") != span.n_tokens:
            raise SchemaError(
                f"record {record_id!r}: n_tokens inconsistent with span range",
                line=line,
                field="echo_span",
            )

    raw_params = _require(obj, "decode_params", dict, line)
    try:
        params = DecodeParams(
            temperature=float(_require(raw_params, "temperature", (int, float), line)),
            max_tokens=_require(raw_params, "max_tokens", int, line),
            seed=_require(raw_params, "seed", int, line),
        )
    except ValueError as exc:
        raise SchemaError(str(exc), line=line, field="decode_params") from exc

    tokens = _require(obj, "trace_tokens", list, line)
    if not all(isinstance(t, str) for t in tokens):
        raise SchemaError("trace_tokens must be strings", line=line, field="trace_tokens")

    rescored = None
    if obj.get("rescored_suffix_logprobs") is not None:
        rescored = _float_list(obj, "rescored_suffix_logprobs", line)

    try:
        correctness = Correctness(_require(obj, "correctness", str, line))
    except ValueError as exc:
        raise SchemaError(str(exc), line=line, field="correctness") from exc

    try:
        return TraceRecord(
            record_id=record_id,
            question=_require(obj, "question", str, line),
            gold_answer=_require(obj, "gold_answer", str, line),
            trace_tokens=tuple(tokens),
            trace_logprobs=_float_list(obj, "trace_logprobs", line),
            correctness=correctness,
            echo_span=span,
            rescored_suffix_logprobs=rescored,
            model_name=_require(obj, "model_name", str, line),
            decode_params=params,
        )
    except ValueError as exc:
        raise SchemaError(str(exc), line=line, field="trace_logprobs") from exc


def parse_trace_file(path: str | Path) -> list[TraceRecord]:
    """Parse a JSONL trace file; malformed lines raise, never skip silently."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            if not isinstance(obj, dict):
                raise SchemaError("record is not an object", line=line_no)
            records.append(_parse_record(obj, line_no))
    return records


def record_to_dict(record: TraceRecord) -> dict:
    span = None
    if record.echo_span is not None:
        span = {
            "start_token": record.echo_span.start_token,
            "end_token": record.echo_span.end_token,
            "n_tokens": record.echo_span.n_tokens,
            "detection_source": record.echo_span.detection_source.value,
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "record_id": record.record_id,
        "question": record.question,
        "gold_answer": record.gold_answer,
        "trace_tokens": list(record.trace_tokens),
        "trace_logprobs": list(record.trace_logprobs),
        "correctness": record.correctness.value,
        "echo_span": span,
        "rescored_suffix_logprobs": (
            None
            if record.rescored_suffix_logprobs is None
            else list(record.rescored_suffix_logprobs)
        ),
        "model_name": record.model_name,
        "decode_params": {
            "temperature": record.decode_params.temperature,
            "max_tokens": record.decode_params.max_tokens,
            "seed": record.decode_params.seed,
        },
    }


def serialize_trace_records(records: Iterable[TraceRecord], path: str | Path) -> None:
    """Write records canonically (sorted keys, one compact line each)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


# --------------------------------------------------------------------------
# segments
# --------------------------------------------------------------------------


def segment_map(
    record: TraceRecord,
    prefix_len: int | None = None,
    question_tokens: int | None = None,
) -> SegmentMap:
    """Split the trace axis into echo-prefix and suffix ranges.

    ``prefix_len`` overrides the record's echo span (fixed-K mode); when
    absent the span length is used.
    """
    if prefix_len is None:
        if record.echo_span is None:
            raise MissingEchoSpan(f"record {record.record_id!r} has no echo span and no prefix_len")
        prefix_len = record.echo_span.n_tokens
    if prefix_len < 0:
        raise ValueError("prefix_len must be >= 0")
    t = record.n_tokens
    prefix_len = min(prefix_len, t)
    return SegmentMap(
        prefix=(0, prefix_len),
        suffix=(prefix_len, t),
        full_answer=(0, t),
        question_tokens=question_tokens,
    )


# --------------------------------------------------------------------------
# attention dump parsing / serialization / validation
# --------------------------------------------------------------------------


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _parse_range(raw, name: str) -> tuple[int, int]:
    if (
        not isinstance(raw, list)
        or len(raw) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw)
    ):
        raise SchemaError(f"{name} must be a [start, end] pair", field=name)
    return (raw[0], raw[1])


def parse_attention_dump(obj: dict) -> AttentionDump:
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version}", field="schema_version")
    record_id = obj.get("record_id")
    if not isinstance(record_id, str):
        raise SchemaError("record_id must be a string", field="record_id")
    n_layers = obj.get("n_layers")
    if not isinstance(n_layers, int) or n_layers < 1:
        raise SchemaError("n_layers must be a positive integer", field="n_layers")
    try:
        mode = DumpMode(obj.get("mode"))
    except ValueError as exc:
        raise SchemaError(f"bad mode {obj.get('mode')!r}", field="mode") from exc

    raw_bounds = obj.get("segment_boundaries")
    if not isinstance(raw_bounds, dict):
        raise SchemaError("segment_boundaries must be an object", field="segment_boundaries")
    raw_prefix = raw_bounds.get("prefix", {})
    if not isinstance(raw_prefix, dict):
        raise SchemaError("prefix boundaries must be an object", field="segment_boundaries.prefix")
    boundaries = SegmentBoundaries(
        question=_parse_range(raw_bounds.get("question"), "question"),
        answer=_parse_range(raw_bounds.get("answer"), "answer"),
        prefix={k: _parse_range(v, f"prefix.{k}") for k, v in sorted(raw_prefix.items())},
    )

    raw_summary = obj.get("summary")
    if not isinstance(raw_summary, dict):
        raise SchemaError("summary must be an object", field="summary")
    summary = {}
    for key, values in raw_summary.items():
        arr = np.asarray(values, dtype=float)
        if arr.shape != (n_layers,):
            raise SchemaError(f"summary series for {key!r} must have one value per layer", field="summary")
        summary[key] = _readonly(arr)

    detail = None
    raw_detail = obj.get("detail")
    if raw_detail is not None:
        if not isinstance(raw_detail, dict):
            raise SchemaError("detail must be an object or null", field="detail")
        to_q = np.asarray(raw_detail.get("to_question"), dtype=float)
        to_first = np.asarray(raw_detail.get("to_first_positions"), dtype=float)
        if to_q.ndim != 2 or to_q.shape[0] != n_layers:
            raise SchemaError("detail.to_question must be [n_layers][n_answer_tokens]", field="detail")
        if to_first.ndim != 3 or to_first.shape[:2] != to_q.shape:
            raise SchemaError(
                "detail.to_first_positions must be [n_layers][n_answer_tokens][C]", field="detail"
            )
        detail = AttentionDetail(to_question=_readonly(to_q), to_first_positions=_readonly(to_first))

    return AttentionDump(
        record_id=record_id,
        n_layers=n_layers,
        mode=mode,
        summary=summary,
        boundaries=boundaries,
        detail=detail,
    )


def parse_attention_dumps(path: str | Path) -> list[AttentionDump]:
    """Read dumps from a JSONL file or from every *.json/*.jsonl in a directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    files = (
        sorted(p for p in path.iterdir() if p.suffix in (".json", ".jsonl"))
        if path.is_dir()
        else [path]
    )
    dumps = []
    for file in files:
        with file.open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"invalid JSON in {file.name}: {exc.msg}", line=line_no) from exc
                dumps.append(parse_attention_dump(obj))
    return dumps


def dump_to_dict(dump: AttentionDump) -> dict:
    detail = None
    if dump.detail is not None:
        detail = {
            "to_question": dump.detail.to_question.tolist(),
            "to_first_positions": dump.detail.to_first_positions.tolist(),
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "record_id": dump.record_id,
        "n_layers": dump.n_layers,
        "mode": dump.mode.value,
        "segment_boundaries": {
            "question": list(dump.boundaries.question),
            "answer": list(dump.boundaries.answer),
            "prefix": {k: list(v) for k, v in dump.boundaries.prefix.items()},
        },
        "summary": {k: v.tolist() for k, v in dump.summary.items()},
        "detail": detail,
    }


def serialize_attention_dumps(dumps: Iterable[AttentionDump], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for dump in dumps:
            fh.write(json.dumps(dump_to_dict(dump), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


_MASS_TOL = 1e-6


def validate_dump_pair(record: TraceRecord, dump: AttentionDump) -> ValidationReport:
    """Cross-check a trace record against its attention sidecar.

    All problems are collected as report entries; nothing raises.
    """
    v: list[Violation] = []
    if record.record_id != dump.record_id:
        v.append(
            Violation("identity", f"record_id mismatch: {record.record_id!r} vs {dump.record_id!r}")
        )

    q_start, q_end = dump.boundaries.question
    a_start, a_end = dump.boundaries.answer
    if not (0 <= q_start <= q_end):
        v.append(Violation("boundary", f"bad question range {dump.boundaries.question}"))
    if q_end != a_start:
        v.append(Violation("boundary", "answer segment must start where the question ends"))
    if a_end - a_start != record.n_tokens:
        v.append(
            Violation(
                "boundary",
                f"answer range spans {a_end - a_start} tokens but trace has {record.n_tokens}",
            )
        )
    for name, (p_start, p_end) in dump.boundaries.prefix.items():
        if p_start != a_start or p_end > a_end or p_end < p_start:
            v.append(Violation("boundary", f"prefix {name!r} range [{p_start},{p_end}) invalid"))
        if name.startswith("k"):
            try:
                k = int(name[1:])
            except ValueError:
                v.append(Violation("boundary", f"unparseable fixed prefix key {name!r}"))
                continue
            if p_end - p_start != min(k, record.n_tokens):
                v.append(
                    Violation(
                        "boundary",
                        f"prefix {name!r} spans {p_end - p_start} tokens, expected "
                        f"{min(k, record.n_tokens)}",
                    )
                )
        elif name == "probe" and record.echo_span is not None:
            if p_end - p_start != record.echo_span.n_tokens:
                v.append(
                    Violation(
                        "boundary",
                        f"probe prefix spans {p_end - p_start} tokens but echo span has "
                        f"{record.echo_span.n_tokens}",
                    )
                )

    for key, series in dump.summary.items():
        if np.any(series < 0.0) or np.any(series > 1.0):
            v.append(Violation("value_range", f"summary {key!r} has values outside [0,1]"))
    for name in dump.boundaries.prefix:
        pkey = f"answer->prefix:{name}"
        if pkey in dump.summary and TO_QUESTION in dump.summary:
            combined = dump.summary[pkey] + dump.summary[TO_QUESTION]
            if np.any(combined > 1.0 + _MASS_TOL):
                v.append(
                    Violation("mass", f"question+{name} mean mass exceeds 1 at some layer")
                )

    if dump.mode is DumpMode.DETAIL and dump.detail is None:
        v.append(Violation("mode", "mode is Detail but no detail arrays present"))
    if dump.mode is DumpMode.SUMMARY and dump.detail is not None:
        v.append(Violation("mode", "mode is Summary but detail arrays present"))
    if dump.detail is not None:
        d = dump.detail
        for name, arr in (("to_question", d.to_question), ("to_first_positions", d.to_first_positions)):
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                v.append(Violation("value_range", f"detail {name} has values outside [0,1]"))
        per_query = d.to_question + d.to_first_positions.sum(axis=2)
        if np.any(per_query > 1.0 + _MASS_TOL):
            v.append(Violation("mass", "per-query detail mass to disjoint segments exceeds 1"))
        if d.to_first_positions.shape[2] > 32:
            v.append(Violation("boundary", "detail covers more than 32 leading answer positions"))

    return ValidationReport(record_id=record.record_id, violations=tuple(v))
