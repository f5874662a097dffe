"""Secondary acceptance: extractor output drives the analysis pipelines end to end."""

from __future__ import annotations

import json
import subprocess
import time

import numpy as np

from echo_lens_extractor.cli import run as extractor_cli
from echo_lens_extractor.extract import attention_matrices, rescore_suffix, score_trace


def test_extractor_end_to_end(tiny_model, items, tmp_path):
    started = time.perf_counter()

    # --- extraction over 20 GSM8K-style items ------------------------------
    raw = tmp_path / "raw.jsonl"
    with raw.open("w", encoding="utf-8") as fh:
        for row in items:
            fh.write(json.dumps(row) + "\n")
    out_dir = tmp_path / "extracted"
    code = extractor_cli(
        [
            "run",
            "--model",
            "tiny:0",
            "--input",
            str(raw),
            "--out-dir",
            str(out_dir),
            "--mode",
            "detail",
            "--fixed-k",
            "8,32",
        ]
    )
    assert code == 0
    traces = out_dir / "traces.jsonl"
    dumps = out_dir / "dumps.jsonl"
    assert len(traces.read_text().splitlines()) == 20

    # --- dumps pass the pair validator (no violations) ---------------------
    proc = subprocess.run(
        ["echo-lens", "validate", str(traces), "--attn", str(dumps)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "0 violations" in proc.stdout

    # --- attention row mass within 1e-3 of 1 -------------------------------
    row = items[0]
    pieces = tiny_model.tokenizer.pieces(row["trace"])
    for matrix in attention_matrices(tiny_model, row["question"], pieces):
        assert np.all(np.abs(matrix.sum(axis=1) - 1.0) <= 1e-3)

    # --- rescore consistency vs a direct concatenated forward pass ---------
    suffix = pieces[row["echo_tokens"] :]
    rescored = rescore_suffix(tiny_model, row["question"], suffix)
    direct = score_trace(tiny_model, row["question"], suffix)
    assert np.allclose(rescored, direct, atol=1e-4)

    # --- gaps pipeline over the produced traces ----------------------------
    gaps_out = tmp_path / "gaps" / "report.json"
    proc = subprocess.run(
        [
            "echo-lens",
            "gaps",
            "--traces",
            str(traces),
            "--out",
            str(gaps_out),
            "--csv",
            str(tmp_path / "gaps" / "bins.csv"),
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stdout + proc.stderr
    report = json.loads(gaps_out.read_text())
    assert report["schema_version"] == 1
    assert report["n_records"] == 20
    assert set(report["groups"]) == {"Correct", "Wrong"}
    assert report["groups"]["Correct"]["n"] + report["groups"]["Wrong"]["n"] == 20

    # --- attn pipeline over the produced dumps -----------------------------
    attn_out = tmp_path / "attn" / "report.json"
    proc = subprocess.run(
        [
            "echo-lens",
            "attn",
            "--traces",
            str(traces),
            "--dumps",
            str(dumps),
            "--mode",
            "probe",
            "--out",
            str(attn_out),
            "--csv",
            str(tmp_path / "attn" / "layers.csv"),
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stdout + proc.stderr
    report = json.loads(attn_out.read_text())
    assert report["schema_version"] == 1
    assert "gap_tables" in report and "probe" in report["gap_tables"]
    assert "tokenwise" in report  # detail dumps enable the per-position tests
    csv_lines = (tmp_path / "attn" / "layers.csv").read_text().splitlines()
    assert csv_lines[0] == "layer,metric,group,mean,sem"
    assert len(csv_lines) > 1

    elapsed = time.perf_counter() - started
    print(f"ACCEPTANCE extractor_end_to_end: PASS ({elapsed:.1f}s < 900s)")
    assert elapsed < 900.0
