from __future__ import annotations

import pytest

from echo_lens_extractor.runtime import load_model


def gsm8k_style_items(n=20):
    """Deterministic synthetic word problems with echo-prefixed traces."""
    items = []
    fillers = ("", " Let me re-read that.", " I want to restate it fully once more.",
               " Reading the question again before doing anything.")
    for i in range(n):
        a, b = 3 + i, 2 + (i % 5)
        question = f"Tom has {a} apples and buys {b} more. How many apples does Tom have now?"
        echo = f"Okay, the question asks: Tom has {a} apples and buys {b} more.{fillers[i % 4]}"
        body = f"Adding them gives {a} plus {b} which equals {a + b}. The answer is {a + b}."
        items.append(
            {
                "record_id": f"gsm{i:02d}",
                "question": question,
                "gold_answer": str(a + b),
                "trace": f"{echo} {body}",
                "correctness": "Correct" if i % 3 else "Wrong",
                "echo_tokens": len(echo.split()),
            }
        )
    return items


@pytest.fixture(scope="session")
def items():
    return gsm8k_style_items()


@pytest.fixture(scope="session")
def tiny_model(items):
    corpus = [r["question"] for r in items] + [r["trace"] for r in items]
    return load_model("tiny:0", corpus=corpus)
