"""Teacher-forced scoring, suffix rescoring, attention dumps, embeddings.

Outputs match the echo-lens trace schema (schema_version 1): trace files are
JSONL TraceRecords, attention sidecars carry layer-major summary arrays and
optional per-token detail rows. Files are written incrementally per record
so long extractions can resume.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AttentionUnavailable, ContextLengthExceeded, EmbedderLoadError
from .runtime import ExtractionModel

SCHEMA_VERSION = 1
DETAIL_POSITIONS = 32


def _input_ids(xm: ExtractionModel, question: str, trace_pieces: Sequence[str]):
    q_ids = [xm.tokenizer.bos_id] + xm.tokenizer.encode_pieces(xm.tokenizer.pieces(question))
    t_ids = xm.tokenizer.encode_pieces(trace_pieces)
    total = len(q_ids) + len(t_ids)
    if total > xm.max_positions:
        raise ContextLengthExceeded(f"{total} tokens exceed the {xm.max_positions} context")
    return q_ids, t_ids


@torch.no_grad()
def _forward(xm: ExtractionModel, ids: list[int], attentions: bool = False):
    batch = torch.tensor([ids], dtype=torch.long)
    return xm.model(batch, output_attentions=attentions)


def _forced_logprobs(logits: torch.Tensor, ids: list[int], start: int) -> list[float]:
    """Logprob of each realized token from position ``start`` onward."""
    log_probs = F.log_softmax(logits[0].float(), dim=-1)
    out = []
    for pos in range(start, len(ids)):
        lp = float(log_probs[pos - 1, ids[pos]])
        out.append(min(lp, 0.0))
    return out


def score_trace(xm: ExtractionModel, question: str, trace_pieces: Sequence[str]) -> list[float]:
    """Teacher-forced per-token logprobs of the trace given the question."""
    q_ids, t_ids = _input_ids(xm, question, trace_pieces)
    ids = q_ids + t_ids
    output = _forward(xm, ids)
    return _forced_logprobs(output.logits, ids, len(q_ids))


def rescore_suffix(xm: ExtractionModel, question: str, suffix_pieces: Sequence[str]) -> list[float]:
    """Suffix logprobs with the question alone as context (echo excluded)."""
    return score_trace(xm, question, suffix_pieces)


def next_token_distributions(
    xm: ExtractionModel, question: str, trace_pieces: Sequence[str]
) -> np.ndarray:
    """Per-position next-token probability rows (softmax over the vocabulary)."""
    q_ids, t_ids = _input_ids(xm, question, trace_pieces)
    output = _forward(xm, q_ids + t_ids)
    return F.softmax(output.logits[0].float(), dim=-1).numpy()


def attention_matrices(
    xm: ExtractionModel, question: str, trace_pieces: Sequence[str]
) -> list[np.ndarray]:
    """Head-averaged post-softmax attention per layer for question+trace."""
    q_ids, t_ids = _input_ids(xm, question, trace_pieces)
    output = _forward(xm, q_ids + t_ids, attentions=True)
    if not output.attentions:
        raise AttentionUnavailable(f"model {xm.name!r} returned no attention maps")
    return [layer[0].float().mean(dim=0).numpy() for layer in output.attentions]


def dump_attention(
    xm: ExtractionModel,
    record_id: str,
    question: str,
    trace_pieces: Sequence[str],
    echo_tokens: int | None,
    fixed_k: Sequence[int] = (32, 64, 128),
    mode: str = "summary",
) -> dict:
    """One attention sidecar object with block summaries per prefix config.

    Fixed prefix lengths larger than the trace are clipped. Detail mode adds
    per-answer-token mass to the question and to each of the first 32 answer
    positions.
    """
    if mode not in ("summary", "detail"):
        raise ValueError(f"unknown dump mode {mode!r}")
    layers = attention_matrices(xm, question, trace_pieces)
    q_ids, t_ids = _input_ids(xm, question, trace_pieces)
    q_len, t_len = len(q_ids), len(t_ids)
    answer = slice(q_len, q_len + t_len)

    prefix_ranges: dict[str, tuple[int, int]] = {}
    if echo_tokens is not None:
        prefix_ranges["probe"] = (q_len, q_len + min(echo_tokens, t_len))
    for k in fixed_k:
        prefix_ranges[f"k{int(k)}"] = (q_len, q_len + min(int(k), t_len))

    def block_series(col_lo: int, col_hi: int) -> list[float]:
        return [float(a[answer, col_lo:col_hi].sum(axis=1).mean()) for a in layers]

    summary = {"answer->question": block_series(0, q_len)}
    for name, (lo, hi) in prefix_ranges.items():
        summary[f"answer->prefix:{name}"] = block_series(lo, hi)

    detail = None
    if mode == "detail":
        cols = min(DETAIL_POSITIONS, t_len)
        to_question = [a[answer, :q_len].sum(axis=1).tolist() for a in layers]
        to_first = [a[answer, q_len : q_len + cols].tolist() for a in layers]
        detail = {"to_question": to_question, "to_first_positions": to_first}

    return {
        "schema_version": SCHEMA_VERSION,
        "record_id": record_id,
        "n_layers": len(layers),
        "mode": "Detail" if mode == "detail" else "Summary",
        "segment_boundaries": {
            "question": [0, q_len],
            "answer": [q_len, q_len + t_len],
            "prefix": {name: [lo, hi] for name, (lo, hi) in prefix_ranges.items()},
        },
        "summary": summary,
        "detail": detail,
    }


# --------------------------------------------------------------------------
# end-to-end extraction
# --------------------------------------------------------------------------


def trace_record(
    xm: ExtractionModel,
    row: dict,
    seed: int = 0,
) -> tuple[dict, list[str]]:
    """Build one schema-version-1 trace record from a raw input row.

    ``row`` carries record_id, question, gold_answer, trace (text),
    correctness, and optionally echo_tokens (leading trace tokens forming
    the echo).
    """
    question = row["question"]
    pieces = xm.tokenizer.pieces(row["trace"])
    logprobs = score_trace(xm, question, pieces)
    echo_tokens = row.get("echo_tokens")
    span = None
    rescored = None
    if echo_tokens is not None:
        echo_tokens = min(int(echo_tokens), len(pieces))
        span = {
            "start_token": 0,
            "end_token": echo_tokens,
            "n_tokens": echo_tokens,
            "detection_source": "Annotation",
        }
        rescored = rescore_suffix(xm, question, pieces[echo_tokens:])
    record = {
        "schema_version": SCHEMA_VERSION,
        "record_id": row["record_id"],
        "question": question,
        "gold_answer": str(row.get("gold_answer", "")),
        "trace_tokens": pieces,
        "trace_logprobs": logprobs,
        "correctness": row.get("correctness", "Unknown"),
        "echo_span": span,
        "rescored_suffix_logprobs": rescored,
        "model_name": xm.name,
        "decode_params": {"temperature": 0.0, "max_tokens": len(pieces), "seed": seed},
    }
    return record, pieces


def _existing_ids(path: Path) -> set[str]:
    if not path.exists():
        return set()
    ids = set()
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                ids.add(json.loads(line)["record_id"])
    return ids


def run_extraction(
    xm: ExtractionModel,
    rows: Iterable[dict],
    out_traces: str | Path,
    out_dumps: str | Path,
    fixed_k: Sequence[int] = (32, 64, 128),
    mode: str = "summary",
    resume: bool = True,
) -> int:
    """Score every row and append trace + dump lines; resumable by record_id."""
    out_traces, out_dumps = Path(out_traces), Path(out_dumps)
    out_traces.parent.mkdir(parents=True, exist_ok=True)
    out_dumps.parent.mkdir(parents=True, exist_ok=True)
    done = _existing_ids(out_traces) & _existing_ids(out_dumps) if resume else set()
    written = 0
    with out_traces.open("a", encoding="utf-8") as traces_fh, out_dumps.open(
        "a", encoding="utf-8"
    ) as dumps_fh:
        for row in rows:
            if row["record_id"] in done:
                continue
            record, pieces = trace_record(xm, row)
            dump = dump_attention(
                xm,
                row["record_id"],
                row["question"],
                pieces,
                row.get("echo_tokens"),
                fixed_k=fixed_k,
                mode=mode,
            )
            traces_fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
            traces_fh.flush()
            dumps_fh.write(json.dumps(dump, sort_keys=True, separators=(",", ":")) + "\n")
            dumps_fh.flush()
            written += 1
    return written


# --------------------------------------------------------------------------
# sentence embeddings for probe features
# --------------------------------------------------------------------------


def embed_texts(embedder_id: str, texts: Sequence[str]) -> tuple[np.ndarray, dict]:
    """Deterministic sentence embeddings.

    ``hash:<dim>`` is the built-in offline embedder: signed hashed
    bag-of-words, L2-normalized. Any other id is treated as a
    sentence-transformers model name.
    """
    if not texts:
        raise ValueError("texts must be non-empty")
    if embedder_id.startswith("hash:"):
        dim = int(embedder_id.split(":", 1)[1])
        if dim < 1:
            raise EmbedderLoadError(f"bad hash dimension in {embedder_id!r}")
        vectors = np.zeros((len(texts), dim))
        for i, text in enumerate(texts):
            for word in text.split():
                digest = hashlib.sha256(word.encode()).digest()
                idx = int.from_bytes(digest[:4], "little") % dim
                sign = 1.0 if digest[4] % 2 == 0 else -1.0
                vectors[i, idx] += sign
            norm = np.linalg.norm(vectors[i])
            if norm > 0:
                vectors[i] /= norm
        return vectors, {"embedder": embedder_id, "dim": dim}
    try:
        from sentence_transformers import SentenceTransformer
        model = SentenceTransformer(embedder_id)
    except Exception as exc:
        raise EmbedderLoadError(f"could not load embedder {embedder_id!r}: {exc}") from exc
    vectors = np.asarray(model.encode(list(texts)))
    return vectors, {"embedder": embedder_id, "dim": int(vectors.shape[1])}


_SENTENCE_BREAK = re.compile(r"[^.?!\n]*[.?!\n]+|[^.?!\n]+$")
_MIN_SENTENCE_WORDS = 3


def sentence_prefixes(text: str) -> list[tuple[str, int]]:
    """Cumulative sentence prefixes with word-token end offsets.

    Mirrors the sentence rule used downstream: split on ., ?, ! and
    newline; fragments under three words merge forward.
    """
    pieces = [m.group(0) for m in _SENTENCE_BREAK.finditer(text) if m.group(0).strip()]
    sentences: list[str] = []
    buffer = ""
    for piece in pieces:
        buffer += piece
        if len(buffer.split()) >= _MIN_SENTENCE_WORDS:
            sentences.append(buffer)
            buffer = ""
    if buffer:
        if sentences:
            sentences[-1] += buffer
        else:
            sentences.append(buffer)
    prefixes = []
    cumulative = ""
    for sentence in sentences:
        cumulative += sentence
        prefixes.append((cumulative, len(cumulative.split())))
    return prefixes


def probe_inputs(embedder_id: str, rows: Iterable[dict]) -> list[dict]:
    """Per-record probe-detection inputs: question + sentence-prefix embeddings."""
    out = []
    for row in rows:
        prefixes = sentence_prefixes(row["trace"])
        texts = [row["question"]] + [p for p, _ in prefixes]
        vectors, meta = embed_texts(embedder_id, texts)
        out.append(
            {
                "record_id": row["record_id"],
                "embedder": meta["embedder"],
                "question_embedding": vectors[0].tolist(),
                "sentence_prefixes": [
                    {"embedding": vectors[1 + i].tolist(), "end_token": end}
                    for i, (_, end) in enumerate(prefixes)
                ],
            }
        )
    return out
