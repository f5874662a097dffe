"""Client-side experiment orchestration against OpenAI-style endpoints.

Covers two interventions plus scoring support: echoic prompting (generate an
initial chain, then re-ground the model with a reminder phrase and the
original question) and echo reinsertion (resume a truncated echo-free trace
with or without an injected echo phrase under identical settings).

Every request/response lands in an append-only run ledger so runs can be
audited and replayed. Time and sleep functions are injectable so that runs
against a deterministic mock transport are byte-identical.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .errors import (
    EmptyTrace,
    EndpointUnreachable,
    MalformedResponse,
    NoAnswerFound,
    RateLimited,
)
from .traces import Correctness, DecodeParams, TraceRecord

DEFAULT_REMINDER = "look back at the question again"
DEFAULT_INSERTION = "now I need to look back at the question again:"

_RETRIABLE_STATUS = {429, 500, 502, 503, 504}


@dataclass
class GenClient:
    """Connection settings for an OpenAI-style completions endpoint."""

    base_url: str
    model: str
    decode: DecodeParams = field(default_factory=DecodeParams)
    api: str = "completions"  # or "chat"
    api_key_env: str = "API_KEY"
    max_in_flight: int = 4
    max_retries: int = 3
    backoff_base: float = 0.5
    timeout: float = 60.0
    transport: httpx.BaseTransport | None = None  # injected in tests
    clock: Callable[[], float] = time.monotonic
    sleeper: Callable[[float], None] = time.sleep

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.api not in ("completions", "chat"):
            raise ValueError(f"unknown api flavor {self.api!r}")

    def endpoint(self) -> str:
        suffix = "/v1/completions" if self.api == "completions" else "/v1/chat/completions"
        return self.base_url.rstrip("/") + suffix

    def headers(self) -> dict[str, str]:
        key = os.environ.get(self.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers


class RunLedger:
    """Append-only JSONL log of every request/response exchange."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, entry: dict) -> None:
        line = json.dumps(entry, sort_keys=True, separators=(",", ":"))
        with self._lock:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        with self.path.open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class Completion:
    text: str
    token_logprobs: tuple[float, ...] | None = None


def _request_body(client: GenClient, prompt: str, params: DecodeParams, logprobs: int | None) -> dict:
    body: dict = {
        "model": client.model,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "seed": params.seed,
    }
    if client.api == "completions":
        body["prompt"] = prompt
        if logprobs is not None:
            body["logprobs"] = logprobs
    else:
        body["messages"] = [{"role": "user", "content": prompt}]
    return body


def _parse_completion(client: GenClient, payload: dict) -> Completion:
    try:
        choice = payload["choices"][0]
        if client.api == "completions":
            text = choice["text"]
        else:
            text = choice["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"response missing completion text: {payload!r}") from exc
    if not isinstance(text, str):
        raise MalformedResponse(f"completion text is not a string: {text!r}")
    lps = None
    lp_obj = choice.get("logprobs") if isinstance(choice, dict) else None
    if isinstance(lp_obj, dict) and isinstance(lp_obj.get("token_logprobs"), list):
        lps = tuple(float(v) for v in lp_obj["token_logprobs"] if v is not None)
    return Completion(text=text, token_logprobs=lps)


def generate(
    client: GenClient,
    prompt: str,
    params: DecodeParams | None = None,
    ledger: RunLedger | None = None,
    logprobs: int | None = None,
    tag: str = "generate",
) -> Completion:
    """Single completion with retry-with-backoff on transient failures."""
    params = params or client.decode
    body = _request_body(client, prompt, params, logprobs)
    url = client.endpoint()
    last_status: int | None = None
    started = client.clock()
    with httpx.Client(transport=client.transport, timeout=client.timeout) as http:
        for attempt in range(client.max_retries + 1):
            if attempt:
                client.sleeper(client.backoff_base * 2 ** (attempt - 1))
            try:
                response = http.post(url, json=body, headers=client.headers())
            except httpx.TransportError:
                last_status = None
                continue
            if response.status_code in _RETRIABLE_STATUS:
                last_status = response.status_code
                continue
            if response.status_code != 200:
                raise MalformedResponse(f"HTTP {response.status_code}: {response.text[:200]}")
            try:
                payload = response.json()
            except json.JSONDecodeError as exc:
                raise MalformedResponse("response body is not JSON") from exc
            completion = _parse_completion(client, payload)
            if ledger is not None:
                ledger.append(
                    {
                        "tag": tag,
                        "url": url,
                        "request": body,
                        "response_text": completion.text,
                        "status": response.status_code,
                        "retries": attempt,
                        "elapsed": round(client.clock() - started, 6),
                        "seed": params.seed,
                    }
                )
            return completion
    if last_status == 429:
        raise RateLimited(f"exhausted {client.max_retries} retries (last status 429)")
    raise EndpointUnreachable(
        f"exhausted {client.max_retries} retries"
        + (f" (last status {last_status})" if last_status else " (connection errors)")
    )


# --------------------------------------------------------------------------
# echoic prompting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EpConfig:
    """Echoic-prompting settings; the phase-1 budget has no default on purpose."""

    phase1_budget: int
    reminder: str = DEFAULT_REMINDER
    phase2_budget: int | None = None


def continuation_prompt(phase1_prompt: str, phase1_text: str, reminder: str, question: str) -> str:
    """Phase-2 prompt: the full phase-1 text, the reminder, then the question."""
    return f"{phase1_prompt}{phase1_text}\n{reminder}\n{question}"


@dataclass(frozen=True)
class EchoicResult:
    question: str
    initial_chain: str
    final_trace: str
    answer: str | None
    degenerate: bool


def echoic_prompting(
    client: GenClient,
    question: str,
    ep_config: EpConfig,
    ledger: RunLedger | None = None,
) -> EchoicResult:
    """Two-phase generation that re-grounds the model on the original question."""
    if not question:
        raise ValueError("question must be non-empty")
    phase1_params = DecodeParams(
        temperature=client.decode.temperature,
        max_tokens=ep_config.phase1_budget,
        seed=client.decode.seed,
    )
    phase1 = generate(client, question, phase1_params, ledger, tag="ep_phase1")
    degenerate = not phase1.text.strip()
    phase2_params = DecodeParams(
        temperature=client.decode.temperature,
        max_tokens=ep_config.phase2_budget or client.decode.max_tokens,
        seed=client.decode.seed,
    )
    prompt2 = continuation_prompt(question, phase1.text, ep_config.reminder, question)
    phase2 = generate(client, prompt2, phase2_params, ledger, tag="ep_phase2")
    final_trace = phase1.text + phase2.text
    try:
        answer = extract_final_answer(phase2.text, mode="strict")
    except NoAnswerFound:
        try:
            answer = extract_final_answer(phase2.text, mode="flex")
        except NoAnswerFound:
            answer = None
    return EchoicResult(
        question=question,
        initial_chain=phase1.text,
        final_trace=final_trace,
        answer=answer,
        degenerate=degenerate,
    )


# --------------------------------------------------------------------------
# echo reinsertion
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InterventionResult:
    record_id: str
    branch: str  # EchoFree | Reinserted
    prompt: str
    completion: str
    answer: str | None
    em_strict: bool
    em_flex: bool

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "branch": self.branch,
            "prompt": self.prompt,
            "completion": self.completion,
            "answer": self.answer,
            "em_strict": self.em_strict,
            "em_flex": self.em_flex,
        }


def truncate_tokens(tokens: Sequence[str], fraction: float) -> list[str]:
    """Keep the leading floor(T * fraction) tokens."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    return list(tokens[: math.floor(len(tokens) * fraction)])


def _score_branch(
    client: GenClient,
    record: TraceRecord,
    prompt: str,
    branch: str,
    ledger: RunLedger | None,
) -> InterventionResult:
    completion = generate(client, prompt, client.decode, ledger, tag=f"reinsert_{branch}")
    try:
        answer = extract_final_answer(completion.text, mode="strict")
    except NoAnswerFound:
        try:
            answer = extract_final_answer(completion.text, mode="flex")
        except NoAnswerFound:
            answer = None
    return InterventionResult(
        record_id=record.record_id,
        branch=branch,
        prompt=prompt,
        completion=completion.text,
        answer=answer,
        em_strict=answer is not None and exact_match(answer, record.gold_answer, "strict"),
        em_flex=answer is not None and exact_match(answer, record.gold_answer, "flex"),
    )


def reinsertion_experiment(
    client: GenClient,
    records: Sequence[TraceRecord],
    truncation: float = 0.50,
    insertion: str = DEFAULT_INSERTION,
    ledger: RunLedger | None = None,
) -> tuple[list[InterventionResult], dict]:
    """Paired resume-vs-reinsert intervention on failed echo-free traces.

    Both branches of a pair share the question, the truncated prefix, the
    decode parameters, and the seed; the reinserted branch appends the echo
    phrase to the shared prefix before resuming.
    """
    for record in records:
        if record.n_tokens == 0:
            raise EmptyTrace(f"record {record.record_id!r} has an empty trace")
        if record.correctness is Correctness.CORRECT:
            raise ValueError(f"record {record.record_id!r} is not a failed trace")

    def run_pair(record: TraceRecord) -> tuple[InterventionResult, InterventionResult]:
        prefix = "".join(truncate_tokens(record.trace_tokens, truncation))
        base_prompt = f"{record.question}\n{prefix}"
        echo_free = _score_branch(client, record, base_prompt, "EchoFree", ledger)
        reinserted = _score_branch(client, record, base_prompt + insertion, "Reinserted", ledger)
        return echo_free, reinserted

    with ThreadPoolExecutor(max_workers=client.max_in_flight) as pool:
        pairs = list(pool.map(run_pair, records))

    results = [r for pair in pairs for r in pair]
    summary = {"n_pairs": len(pairs), "truncation": truncation, "branches": {}}
    for branch in ("EchoFree", "Reinserted"):
        rows = [r for r in results if r.branch == branch]
        n = len(rows)
        summary["branches"][branch] = {
            "n": n,
            "em_strict_pct": 100.0 * sum(r.em_strict for r in rows) / n if n else None,
            "em_flex_pct": 100.0 * sum(r.em_flex for r in rows) / n if n else None,
        }
    return results, summary


# --------------------------------------------------------------------------
# answer extraction and exact match
# --------------------------------------------------------------------------

_NUMBER = re.compile(r"-?\d[\d,]*(?:\.\d+)?")


def _last_boxed(text: str) -> str | None:
    marker = r"\boxed{"
    start = text.rfind(marker)
    if start < 0:
        return None
    depth = 1
    i = start + len(marker)
    out = []
    while i < len(text) and depth:
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                break
        out.append(ch)
        i += 1
    return "".join(out).strip() if depth == 0 else None


def extract_final_answer(text: str, mode: str = "strict") -> str:
    """Pull the final answer out of a completion.

    Strict looks for the token after the last '#### ' marker, then the last
    boxed expression. Flex takes the last numeric literal, normalized
    (commas stripped, no trailing period, unit words excluded).
    """
    if mode == "strict":
        marker = text.rfind("#### ")
        if marker >= 0:
            answer = text[marker + 5 :].splitlines()[0].strip()
            if answer:
                return answer
        boxed = _last_boxed(text)
        if boxed:
            return boxed
        raise NoAnswerFound("no '####' marker or boxed expression found")
    if mode == "flex":
        matches = _NUMBER.findall(text)
        if not matches:
            raise NoAnswerFound("no numeric literal found")
        return matches[-1].replace(",", "")
    raise ValueError(f"unknown extraction mode {mode!r}")


def _canonical(value: str) -> str:
    return value.strip().replace(",", "").rstrip(".")


def exact_match(prediction: str, gold: str, mode: str = "strict") -> bool:
    """Answer-level correctness; strict is canonical string equality, flex numeric."""
    if not gold:
        raise ValueError("gold answer must be non-empty")
    pred_c, gold_c = _canonical(prediction), _canonical(gold)
    if mode == "strict":
        return pred_c == gold_c
    if mode == "flex":
        try:
            return abs(float(pred_c) - float(gold_c)) <= 1e-6
        except ValueError:
            return pred_c == gold_c
    raise ValueError(f"unknown match mode {mode!r}")
