"""Paired echo-distilled / echo-trimmed SFT corpus construction.

Starts from a pool of verified teacher traces (question, think block, final
answer). Each question ends up in both corpora: the echo-distilled side
guarantees an explicit echo-style opening, the normal side guarantees its
absence; the teacher model performs the edits and every edited trace is
re-verified against the gold answer before it is kept. Questions dropped in
one branch are dropped from both so the corpora stay paired.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import AnswerChanged, EmptyPool, ThinkBlockMissing
from .orchestrator import GenClient, RunLedger, exact_match, generate

SCHEMA_VERSION = 1

COT_GENERATION_PROMPT = (
    "You are solving math problems. Structure your entire thought process within a "
    "single pair of <think> and </think> tags. After you've finished thinking, provide "
    "the final, concise answer on a new line. The final answer should be a plain value."
)

ECHO_INSERTION_PROMPT = (
    "You are solving math problems. Think out loud naturally. To ensure you fully "
    "understand the problem, you must repeat the question or key parts of it multiple "
    "times throughout your reasoning process before you start solving. For instance, "
    "you might re-read it to confirm details or after a few steps of calculation to "
    "ensure you are on track. Start by repeating the problem, then reason step by step. "
    "Wrap the entire internal thinking process with a single pair of <think> and "
    "</think> tags, and put the final answer after the thinking. The final answer "
    "should be a concise plain value (number if applicable). At the very beginning of "
    "your <think>, start with the following opening line and then continue the "
    "original reasoning. Do not change the final answer."
)

ECHO_REMOVAL_PROMPT = (
    "You are given a math question and a chain-of-thought solution that begins by "
    "repeating or paraphrasing the question. Rewrite the reasoning so that it no "
    "longer repeats the question at the beginning. Keep all subsequent reasoning "
    "steps and the final answer exactly the same. Do not change the logic or the "
    "final answer; only remove the initial echo segment. Wrap the internal thinking "
    "in <think> and </think> as before."
)

OPENING_VARIANTS = (
    "Okay, let me see. The problem is asking: [QUESTION]",
    "Alright, so the question is: [QUESTION]",
    "Let me understand this problem. We have: [QUESTION]",
    "So the problem states: [QUESTION]",
)


@dataclass(frozen=True)
class TeacherTrace:
    question: str
    think_content: str
    final_answer: str
    gold_answer: str
    verified: bool
    eop_present: bool


@dataclass(frozen=True)
class DropEntry:
    question: str
    reason: str

    def to_dict(self) -> dict:
        return {"question": self.question, "reason": self.reason}


_THINK_BLOCK = re.compile(r"<think>(.*?)</think>", re.DOTALL)


def parse_teacher_output(text: str) -> tuple[str, str]:
    """Extract the single think block and the trailing plain answer."""
    match = _THINK_BLOCK.search(text)
    if match is None:
        raise ThinkBlockMissing("output has no <think>...</think> block")
    answer = text[match.end() :].strip()
    return match.group(1).strip(), answer


def teacher_prompt(template: str, question: str) -> str:
    return f"{template}\n\nQuestion: {question}"


def generate_teacher_pool(
    client: GenClient,
    items: Sequence[tuple[str, str]],  # (question, gold answer)
    template: str = COT_GENERATION_PROMPT,
    eop_gate: Callable[[str, str], bool] | None = None,
    ledger: RunLedger | None = None,
) -> tuple[list[TeacherTrace], list[DropEntry]]:
    """Query the teacher per question; keep only traces whose answer verifies."""
    pool: list[TeacherTrace] = []
    drops: list[DropEntry] = []
    for question, gold in items:
        completion = generate(client, teacher_prompt(template, question), ledger=ledger, tag="teacher_cot")
        try:
            think, answer = parse_teacher_output(completion.text)
        except ThinkBlockMissing:
            drops.append(DropEntry(question, "think_block_missing"))
            continue
        if not answer:
            drops.append(DropEntry(question, "no_answer"))
            continue
        if not exact_match(answer, gold, "strict"):
            drops.append(DropEntry(question, "answer_mismatch"))
            continue
        pool.append(
            TeacherTrace(
                question=question,
                think_content=think,
                final_answer=answer,
                gold_answer=gold,
                verified=True,
                eop_present=eop_gate(question, think) if eop_gate else False,
            )
        )
    return pool, drops


def _edit_request(instruction: str, trace: TeacherTrace, opening: str | None = None) -> str:
    parts = [instruction]
    if opening is not None:
        parts.append(f"Opening line: {opening}")
    parts.append(f"Question: {trace.question}")
    parts.append(f"Original solution:\n<think>{trace.think_content}</think>\n{trace.final_answer}")
    return "\n\n".join(parts)


def insert_echo(
    client: GenClient,
    trace: TeacherTrace,
    rng: np.random.Generator,
    opening_variants: Sequence[str] = OPENING_VARIANTS,
    ledger: RunLedger | None = None,
) -> tuple[TeacherTrace, int]:
    """Teacher-edit a no-echo trace to open with an echo; re-verify the answer."""
    if trace.eop_present:
        raise ValueError("trace already has an echo opening; nothing to insert")
    variant_id = int(rng.integers(len(opening_variants)))
    opening = opening_variants[variant_id].replace("[QUESTION]", trace.question)
    prompt = _edit_request(ECHO_INSERTION_PROMPT, trace, opening=opening)
    completion = generate(client, prompt, ledger=ledger, tag="teacher_insert_echo")
    think, answer = parse_teacher_output(completion.text)
    if not exact_match(answer, trace.gold_answer, "strict"):
        raise AnswerChanged(f"edited answer {answer!r} no longer matches gold {trace.gold_answer!r}")
    edited = replace(trace, think_content=think, final_answer=answer, eop_present=True)
    return edited, variant_id


def remove_echo(
    client: GenClient,
    trace: TeacherTrace,
    ledger: RunLedger | None = None,
) -> TeacherTrace:
    """Teacher-edit an echo-opening trace to drop the echo; re-verify the answer."""
    if not trace.eop_present:
        raise ValueError("trace has no echo opening; nothing to remove")
    prompt = _edit_request(ECHO_REMOVAL_PROMPT, trace)
    completion = generate(client, prompt, ledger=ledger, tag="teacher_remove_echo")
    think, answer = parse_teacher_output(completion.text)
    if not exact_match(answer, trace.gold_answer, "strict"):
        raise AnswerChanged(f"edited answer {answer!r} no longer matches gold {trace.gold_answer!r}")
    return replace(trace, think_content=think, final_answer=answer, eop_present=False)


@dataclass(frozen=True)
class SftPair:
    question: str
    gold_answer: str
    ed_think: str
    normal_think: str
    variant_id: int | None  # opening variant used when the ED side was edited
    ed_edited: bool
    normal_edited: bool

    def word_tokens(self, side: str) -> int:
        think = self.ed_think if side == "ed" else self.normal_think
        return len(think.split())


def build_paired_corpora(
    client: GenClient,
    pool: Sequence[TeacherTrace],
    out_dir: str | Path,
    seed: int = 0,
    eop_gate: Callable[[TeacherTrace], bool] | None = None,
    opening_variants: Sequence[str] = OPENING_VARIANTS,
    ledger: RunLedger | None = None,
) -> tuple[list[SftPair], dict]:
    """Produce ed_sft.jsonl, normal_sft.jsonl and a manifest from one pool.

    Every retained question appears in both files. A failure in either edit
    branch (missing think block, changed answer) drops the question from
    both, recorded in the manifest's drop reasons.
    """
    if not pool:
        raise EmptyPool("teacher pool is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    pairs: list[SftPair] = []
    drops: list[DropEntry] = []
    for trace in pool:
        has_echo = eop_gate(trace) if eop_gate else trace.eop_present
        gated = replace(trace, eop_present=has_echo)
        try:
            if has_echo:
                normal = remove_echo(client, gated, ledger=ledger)
                pairs.append(
                    SftPair(
                        question=trace.question,
                        gold_answer=trace.gold_answer,
                        ed_think=trace.think_content,
                        normal_think=normal.think_content,
                        variant_id=None,
                        ed_edited=False,
                        normal_edited=True,
                    )
                )
            else:
                edited, variant_id = insert_echo(
                    client, gated, rng, opening_variants=opening_variants, ledger=ledger
                )
                pairs.append(
                    SftPair(
                        question=trace.question,
                        gold_answer=trace.gold_answer,
                        ed_think=edited.think_content,
                        normal_think=trace.think_content,
                        variant_id=variant_id,
                        ed_edited=True,
                        normal_edited=False,
                    )
                )
        except (AnswerChanged, ThinkBlockMissing) as exc:
            drops.append(DropEntry(trace.question, exc.code))

    def write_side(name: str, side: str) -> Path:
        path = out_dir / name
        with path.open("w", encoding="utf-8") as fh:
            for pair in pairs:
                record = {
                    "question": pair.question,
                    "think": pair.ed_think if side == "ed" else pair.normal_think,
                    "answer": pair.gold_answer,
                    "variant_id": pair.variant_id if side == "ed" else None,
                    "edited": pair.ed_edited if side == "ed" else pair.normal_edited,
                }
                fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
        return path

    write_side("ed_sft.jsonl", "ed")
    write_side("normal_sft.jsonl", "normal")

    def mean_tokens(side: str) -> float | None:
        if not pairs:
            return None
        return math.fsum(p.word_tokens(side) for p in pairs) / len(pairs)

    reason_counts: dict[str, int] = {}
    for drop in drops:
        reason_counts[drop.reason] = reason_counts.get(drop.reason, 0) + 1
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "n_pairs": len(pairs),
        "n_dropped": len(drops),
        "drop_reasons": reason_counts,
        "drops": [d.to_dict() for d in drops],
        "mean_word_tokens": {"ed": mean_tokens("ed"), "normal": mean_tokens("normal")},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return pairs, manifest
