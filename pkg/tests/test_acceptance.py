"""Acceptance gate: one test per top-level criterion, at stated tolerances.

Each test prints a single PASS/FAIL line (visible with -s or in captured
output) and enforces its runtime budget.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import httpx
import numpy as np
import pytest

from echo_lens import likelihood, oracle, probe, stats
from echo_lens.attention import block_attention, discriminability
from echo_lens.cli import run
from echo_lens.errors import AnswerChanged, Separation
from echo_lens.orchestrator import (
    DEFAULT_INSERTION,
    DEFAULT_REMINDER,
    EpConfig,
    GenClient,
    RunLedger,
    echoic_prompting,
    exact_match,
    reinsertion_experiment,
)
from echo_lens.traces import Correctness, DecodeParams

from conftest import make_record
from test_orchestrator import EM_TABLE, make_client, reinsert_handler, scripted_ep_handler, wrong_record
from test_probe import cluster_samples, identity_probe, prefixes_for_scores
from test_sft import GOLDS, make_trace, mixed_pool, teacher_handler
from test_stats import pairwise_auroc, synthetic_logistic_data, welch_oracle

FIXTURES = Path(__file__).parent / "fixtures"


@contextmanager
def criterion(name: str, limit_seconds: float):
    started = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {name}: FAIL ({time.perf_counter() - started:.2f}s)")
        raise
    elapsed = time.perf_counter() - started
    print(f"ACCEPTANCE {name}: PASS ({elapsed:.2f}s < {limit_seconds:.0f}s)")
    assert elapsed < limit_seconds, f"{name} exceeded its {limit_seconds}s budget"


def test_toy_oracle_suite():
    with criterion("toy_oracle", 10.0):
        model = oracle.ToyLM.uniform(symbols=("a", "b"), max_len=4)
        predicate = oracle.first_token_is("a")
        full = oracle.enumerate_distribution(model)
        z = oracle.partition_function(model, predicate)
        tau = oracle.trimmed_distribution(model, predicate)
        # trimmed distribution equals exhaustive enumeration to 1e-12
        for seq, p in full.items():
            expected = 0.0 if predicate.is_echo(seq) else p / z
            assert abs(tau[seq] - expected) <= 1e-12
        assert abs(math.fsum(tau.values()) - 1.0) <= 1e-12
        # rejection sampling empirical distribution within TV 0.01 at n=1e5
        samples, rate = oracle.rejection_sample(
            model, predicate, np.random.default_rng(0), 100_000
        )
        tv = oracle.total_variation(oracle.empirical_distribution(samples), tau)
        assert tv < 0.01
        assert abs(rate - z) <= 3.0 * math.sqrt(z * (1.0 - z) / 100_000)
        # decomposition identity holds to 1e-12 for every trim sequence
        for seq, p in full.items():
            if predicate.is_trim(seq) and p > 0:
                r = oracle.decomposition_check(model, predicate, seq)
                assert abs(r.l_tau - (r.l_pi - r.c)) <= 1e-12


def test_likelihood_suite(tmp_path, gap_fixture_records):
    with criterion("likelihood", 5.0):
        # definitional zero for an empty echo
        empty = likelihood.echo_likelihood_gap(gap_fixture_records[2])
        assert empty.delta_l == 0.0
        # hand-computed fixture arithmetic, exact
        r1 = likelihood.echo_likelihood_gap(gap_fixture_records[0])
        assert (r1.delta_l, r1.delta_l_suffix, r1.delta_per_removed) == (2.0, 1.5, 0.5)
        r2 = likelihood.echo_likelihood_gap(gap_fixture_records[1])
        assert (r2.delta_l, r2.delta_l_suffix, r2.delta_per_removed) == (1.5, 0.5, -0.5)
        r4 = likelihood.echo_likelihood_gap(gap_fixture_records[3])
        assert (r4.delta_l, r4.approximate) == (0.5, True)
        # stratification conserves counts
        results = [r1, r2, empty, r4]
        bins = likelihood.stratify(results, likelihood.labels_from_records(gap_fixture_records))
        assert sum(b.n for b in bins) == len(results)
        # report matches the golden byte-identically
        out = tmp_path / "report.json"
        code = run(
            [
                "gaps",
                "--traces",
                str(FIXTURES / "gaps_traces.jsonl"),
                "--out",
                str(out),
                "--csv",
                str(tmp_path / "bins.csv"),
            ]
        )
        assert code == 0
        assert out.read_bytes() == (FIXTURES / "gaps_report_golden.json").read_bytes()
        assert (tmp_path / "bins.csv").read_bytes() == (
            FIXTURES / "gaps_bins_golden.csv"
        ).read_bytes()


def test_attention_suite(tmp_path):
    with criterion("attention", 10.0):
        # block attention equals brute force on 1000 random row-stochastic matrices
        rng = np.random.default_rng(42)
        for _ in range(1000):
            t = int(rng.integers(5, 21))
            matrix = rng.random((t, t))
            matrix /= matrix.sum(axis=1, keepdims=True)
            q = rng.choice(t, size=int(rng.integers(1, t + 1)), replace=False)
            k = rng.choice(t, size=int(rng.integers(0, t + 1)), replace=False)
            ours = block_attention(matrix, q, k)
            brute = 0.0
            for i in q:
                for j in k:
                    brute += matrix[i, j]
            assert abs(ours - brute / len(q)) <= 1e-12
        # group-swap antisymmetry and AUC complement, exact
        c = rng.normal(0.14, 0.01, size=(12, 32))
        w = rng.normal(0.10, 0.01, size=(12, 32))
        forward = discriminability(c, w)
        backward = discriminability(w, c)
        for name in forward:
            assert forward[name].cohens_d == -backward[name].cohens_d
            assert forward[name].auc + backward[name].auc == 1.0
        # table-shaped report matches the golden byte-identically
        out = tmp_path / "report.json"
        code = run(
            [
                "attn",
                "--traces",
                str(FIXTURES / "attn_traces.jsonl"),
                "--dumps",
                str(FIXTURES / "attn_dumps.jsonl"),
                "--mode",
                "probe",
                "--out",
                str(out),
                "--csv",
                str(tmp_path / "layers.csv"),
            ]
        )
        assert code == 0
        assert out.read_bytes() == (FIXTURES / "attn_report_golden.json").read_bytes()
        assert (tmp_path / "layers.csv").read_bytes() == (
            FIXTURES / "attn_layers_golden.csv"
        ).read_bytes()


def test_stats_suite():
    with criterion("stats", 30.0):
        # AUROC equals the O(n^2) pairwise oracle over 50 seeds
        for seed in range(50):
            rng = np.random.default_rng(seed)
            pos = rng.normal(0.3, 1.0, size=200)
            neg = rng.normal(0.0, 1.0, size=200)
            if seed % 3 == 0:
                pos, neg = np.round(pos, 1), np.round(neg, 1)
            assert abs(stats.auroc(pos, neg) - pairwise_auroc(pos, neg)) <= 1e-12
        # Cohen's d hand cases, exact
        assert stats.cohens_d([0.0, 2.0], [0.0, 0.0]) == 1.0
        a = [0.1, 0.4, 0.9, 1.3]
        b = [0.0, 0.2, 0.3]
        assert stats.cohens_d(a, b) == -stats.cohens_d(b, a)
        # Welch matches the independent implementation to 1e-10
        rng = np.random.default_rng(99)
        for _ in range(25):
            a = rng.normal(0.5, 1.2, size=int(rng.integers(4, 50)))
            b = rng.normal(0.0, 0.6, size=int(rng.integers(4, 50)))
            ours = stats.welch_t(a, b)
            t, dof, p = welch_oracle(a, b)
            assert abs(ours.t - t) <= 1e-10
            assert abs(ours.dof - dof) <= 1e-10
            assert abs(ours.p - p) <= 1e-10
        # IRLS recovers the generator within two standard errors
        beta_true = (0.12, 0.24, 0.001)
        X, y = synthetic_logistic_data(seed=12, n=2000, beta=beta_true)
        result = stats.logistic_irls(X, y)
        for b_hat, se, b in zip(result.coefficients, result.standard_errors, beta_true):
            assert abs(b_hat - b) <= 2.0 * se
        # separation is flagged on separable data
        x = np.linspace(-2, 2, 80)
        with pytest.raises(Separation):
            stats.logistic_irls(np.column_stack([np.ones(80), x]), (x > 0).astype(float))


def test_probe_suite():
    with criterion("probe", 60.0):
        # gradients match central finite differences over >= 100 draws
        rng = np.random.default_rng(123)
        h = 1e-4
        checked = 0
        while checked < 100:
            input_dim, hidden, n = 6, 4, 3
            w1 = rng.uniform(-0.8, 0.8, (hidden, input_dim))
            b1 = rng.uniform(-0.5, 0.5, hidden)
            w2 = rng.uniform(-0.8, 0.8, hidden)
            b2 = float(rng.uniform(-0.5, 0.5))
            x = rng.normal(0.0, 1.0, (n, input_dim))
            y = rng.integers(0, 2, n).astype(float)
            if np.min(np.abs(x @ w1.T + b1)) < 1e-3:
                continue
            _, grads = probe.loss_and_gradients(w1, b1, w2, b2, x, y, 1.7)
            params = [w1, b1, w2, np.array([b2])]
            analytic = [grads[0], grads[1], grads[2], np.array([grads[3]])]
            for p_idx, param in enumerate(params):
                flat = param.ravel()
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    up, _ = probe.loss_and_gradients(
                        params[0], params[1], params[2], params[3][0], x, y, 1.7
                    )
                    flat[i] = orig - h
                    down, _ = probe.loss_and_gradients(
                        params[0], params[1], params[2], params[3][0], x, y, 1.7
                    )
                    flat[i] = orig
                    numeric = (up - down) / (2 * h)
                    a = analytic[p_idx].ravel()[i]
                    scale = max(abs(a), abs(numeric))
                    if scale > 1e-6:
                        assert abs(a - numeric) / scale < 1e-4
                    else:
                        assert abs(a - numeric) < 1e-8
            checked += 1
        # deterministic training by seed
        data_rng = np.random.default_rng(42)
        samples = cluster_samples(data_rng, n_per_class=500)
        cfg = probe.TrainConfig(seed=0)
        model_a, report_a = probe.train_probe(samples, cfg)
        model_b, report_b = probe.train_probe(samples, cfg)
        assert np.array_equal(model_a.w1, model_b.w1)
        assert np.array_equal(model_a.w2, model_b.w2)
        assert report_a == report_b
        # AUROC >= 0.95 on separable synthetic clusters (held-out split)
        test_samples = [samples[i] for i in report_a.split_indices[2]]
        metrics = probe.evaluate_probe(model_a, test_samples)
        assert metrics["auroc"] >= 0.95
        # hysteresis span logic matches the four threshold examples exactly
        p = identity_probe()
        span = probe.detect_echo_span(
            p, np.zeros(4), prefixes_for_scores([0.7, 0.65, 0.2, 0.1], [5, 9, 14, 20])
        )
        assert span is not None and span.end_token == 14
        assert (
            probe.detect_echo_span(p, np.zeros(4), prefixes_for_scores([0.55], [5])) is None
        )
        span = probe.detect_echo_span(p, np.zeros(4), prefixes_for_scores([0.9], [5]))
        assert span is not None and span.end_token == 5
        span = probe.detect_echo_span(
            p, np.zeros(4), prefixes_for_scores([0.8, 0.14], [5, 9])
        )
        assert span is not None and span.end_token == 5  # second prefix below exit


def test_orchestration_suite(tmp_path):
    with criterion("orchestration", 10.0):
        # EP second request body is byte-exact per the template
        recorded = []
        question = "What is 6 * 7?"
        phase1 = " Let me think."
        client = make_client(scripted_ep_handler(phase1, " #### 42", recorded))
        echoic_prompting(client, question, EpConfig(phase1_budget=32))
        assert recorded[1]["prompt"] == f"{question}{phase1}\n{DEFAULT_REMINDER}\n{question}"
        # reinsertion pairs share prefix, params, and seed per the ledger
        ledger = RunLedger(tmp_path / "ledger.jsonl")
        client = make_client(reinsert_handler)
        records = [wrong_record(f"w{i}", n_tokens=6 + i) for i in range(3)]
        reinsertion_experiment(client, records, ledger=ledger)
        entries = ledger.entries()
        free = {
            e["request"]["prompt"]: e for e in entries if e["tag"] == "reinsert_EchoFree"
        }
        paired = 0
        for entry in entries:
            if entry["tag"] != "reinsert_Reinserted":
                continue
            base = entry["request"]["prompt"][: -len(DEFAULT_INSERTION)]
            partner = free[base]
            for key in ("seed", "temperature", "max_tokens", "model"):
                assert entry["request"][key] == partner["request"][key]
            paired += 1
        assert paired == 3
        # EM strict/flex fixture table (>= 20 cases) fully correct
        assert len(EM_TABLE) >= 20
        for pred, gold, mode, expected in EM_TABLE:
            assert exact_match(pred, gold, mode) is expected
        # deterministic reruns are byte-identical
        blobs = []
        for run_idx in range(2):
            path = tmp_path / f"ledger{run_idx}.jsonl"
            client = make_client(reinsert_handler)
            results, summary = reinsertion_experiment(
                client, [wrong_record(f"w{i}") for i in range(3)], ledger=RunLedger(path)
            )
            blobs.append(
                json.dumps([r.to_dict() for r in results], sort_keys=True)
                + json.dumps(summary, sort_keys=True)
                + path.read_text()
            )
        assert blobs[0] == blobs[1]


def test_sft_factory_suite(tmp_path):
    with criterion("sft_factory", 10.0):
        counter = itertools.count()
        client = GenClient(
            base_url="http://mock-teacher",
            model="teacher-lm",
            decode=DecodeParams(temperature=0.0, max_tokens=512, seed=0),
            transport=httpx.MockTransport(teacher_handler),
            sleeper=lambda s: None,
            clock=lambda: float(next(counter)),
        )
        from echo_lens.sft import build_paired_corpora

        pool = mixed_pool() + [make_trace("Q-drift", gold="21")]
        pairs, manifest = build_paired_corpora(client, pool, tmp_path, seed=0)
        # pairing bijection between the two corpora
        ed = [json.loads(l) for l in (tmp_path / "ed_sft.jsonl").read_text().splitlines()]
        normal = [
            json.loads(l) for l in (tmp_path / "normal_sft.jsonl").read_text().splitlines()
        ]
        assert sorted(r["question"] for r in ed) == sorted(r["question"] for r in normal)
        # suffix token-identity after stripping the echo prefix
        for pair in pairs:
            assert pair.ed_think.endswith(pair.normal_think)
            assert len(pair.ed_think) > len(pair.normal_think)
        # answer-drift examples dropped with the right reason
        assert manifest["n_dropped"] == 1
        assert manifest["drop_reasons"] == {"answer_changed": 1}
        assert all(p.question != "Q-drift" for p in pairs)
