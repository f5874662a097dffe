"""Unified command-line entry point.

Subcommands: validate, probe, gaps, attn, regress, oracle, ep, reinsert, sft.
A TOML config file may supply defaults (top-level keys or per-subcommand
tables); explicit flags win. Every run that writes outputs also drops a
run_meta.json with the resolved configuration and library versions so the
run can be reproduced byte-for-byte against the same inputs.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

import numpy as np

from . import __version__, attention, figures, likelihood, oracle, probe, reports, sft
from .errors import EchoLensError, UsageError
from .orchestrator import (
    DEFAULT_INSERTION,
    EpConfig,
    GenClient,
    RunLedger,
    echoic_prompting,
    exact_match,
    reinsertion_experiment,
)
from .traces import (
    Correctness,
    DecodeParams,
    parse_attention_dumps,
    parse_trace_file,
    validate_dump_pair,
)


def versions() -> dict:
    import httpx
    import matplotlib
    import scipy

    return {
        "echo_lens": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
        "httpx": httpx.__version__,
    }


def _global_flags() -> argparse.ArgumentParser:
    # Shared by the root parser and every leaf so flags work in either
    # position; SUPPRESS keeps leaf defaults from clobbering root values.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="TOML config merged under flags")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="max parallel requests")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", default=argparse.SUPPRESS, help="output file (report subcommands)")
    return p


def build_parser() -> argparse.ArgumentParser:
    gp = _global_flags()
    root = argparse.ArgumentParser(prog="echo-lens", description=__doc__, parents=[gp])
    root.set_defaults(config=None, jobs=None, seed=None, out=None)
    sub = root.add_subparsers(dest="command")

    p = sub.add_parser("validate", help="check trace files and attention sidecars", parents=[gp])
    p.add_argument("traces")
    p.add_argument("--attn", default=None, help="attention dump file or directory")

    p = sub.add_parser("probe", help="train / evaluate / run the echo probe")
    probe_sub = p.add_subparsers(dest="probe_command")
    t = probe_sub.add_parser("train", parents=[gp])
    t.add_argument("--samples", required=True)
    t.add_argument("--out-model", required=True)
    t.add_argument("--report", default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--weight-decay", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--max-epochs", type=int, default=None)
    t.add_argument("--patience", type=int, default=None)
    t.add_argument("--hidden-dim", type=int, default=None)
    e = probe_sub.add_parser("eval", parents=[gp])
    e.add_argument("--model", required=True)
    e.add_argument("--samples", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    d = probe_sub.add_parser("detect", parents=[gp])
    d.add_argument("--model", required=True)
    d.add_argument("--embeddings", required=True, help="per-record sentence-prefix embeddings")

    p = sub.add_parser("gaps", help="echo likelihood gap report", parents=[gp])
    p.add_argument("--traces", required=True)
    p.add_argument("--csv", default=None, help="stratification table output")
    p.add_argument("--bin-width", type=int, default=None)
    p.add_argument("--min-bin-count", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("attn", help="layer-wise attention report", parents=[gp])
    p.add_argument("--traces", required=True)
    p.add_argument("--dumps", required=True)
    p.add_argument("--mode", default="probe", help="probe or fixed:32,64,128")
    p.add_argument("--csv", default=None, help="layer series output")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("regress", help="logistic regression of correctness on gap metrics", parents=[gp])
    p.add_argument("--traces", required=True)

    p = sub.add_parser("oracle", help="toy-model identity checks")
    oracle_sub = p.add_subparsers(dest="oracle_command")
    c = oracle_sub.add_parser("check", parents=[gp])
    c.add_argument("--samples", type=int, default=100_000)

    p = sub.add_parser("ep", help="echoic prompting runs")
    ep_sub = p.add_subparsers(dest="ep_command")
    r = ep_sub.add_parser("run", parents=[gp])
    r.add_argument("--questions", required=True)
    r.add_argument("--endpoint", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--concurrency", type=int, default=None, help="alias for --jobs")
    r.add_argument("--phase1-budget", type=int, required=True)
    r.add_argument("--reminder", default=None)
    r.add_argument("--max-tokens", type=int, default=None)
    r.add_argument("--temperature", type=float, default=None)
    r.add_argument("--out-dir", required=True)

    p = sub.add_parser("reinsert", help="echo reinsertion intervention")
    re_sub = p.add_subparsers(dest="reinsert_command")
    r = re_sub.add_parser("run", parents=[gp])
    r.add_argument("--traces", required=True)
    r.add_argument("--endpoint", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--concurrency", type=int, default=None, help="alias for --jobs")
    r.add_argument("--truncation", type=float, default=None)
    r.add_argument("--insertion", default=None)
    r.add_argument("--max-tokens", type=int, default=None)
    r.add_argument("--temperature", type=float, default=None)
    r.add_argument("--out-dir", required=True)

    p = sub.add_parser("sft", help="paired echo-distilled corpus construction")
    sft_sub = p.add_subparsers(dest="sft_command")
    b = sft_sub.add_parser("build", parents=[gp])
    b.add_argument("--questions", required=True)
    b.add_argument("--endpoint", required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--max-tokens", type=int, default=None)
    b.add_argument("--out-dir", required=True)

    return root


class _Config:
    """Flag resolution: explicit CLI value, else config table, else default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.table: dict = {}
        if args.config:
            with open(args.config, "rb") as fh:
                self.table = tomllib.load(fh)
        self.resolved: dict = {}

    def get(self, key: str, default, cli_value=None):
        section = self.table.get(self.args.command, {})
        if cli_value is not None:
            value = cli_value
        elif isinstance(section, dict) and key in section:
            value = section[key]
        elif key in self.table and not isinstance(self.table[key], dict):
            value = self.table[key]
        else:
            value = default
        self.resolved[key] = value
        return value


def _write_run_meta(cfg: _Config, out_dir: Path, argv: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    reports.write_json(
        {
            "command": cfg.args.command,
            "argv": argv,
            "resolved_config": cfg.resolved,
            "versions": versions(),
        },
        out_dir / "run_meta.json",
    )


def _load_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _labeled_records(records):
    unknown = [r.record_id for r in records if r.correctness is Correctness.UNKNOWN]
    if unknown:
        raise UsageError(f"records without Correct/Wrong labels: {unknown[:5]}")
    return records


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _cmd_validate(cfg: _Config, argv: list[str]) -> int:
    args = cfg.args
    records = parse_trace_file(args.traces)
    print(f"parsed {len(records)} trace records from {args.traces}")
    violations = 0
    if args.attn:
        dumps = {d.record_id: d for d in parse_attention_dumps(args.attn)}
        for record in records:
            dump = dumps.get(record.record_id)
            if dump is None:
                print(f"  {record.record_id}: no attention dump")
                continue
            report = validate_dump_pair(record, dump)
            for violation in report.violations:
                violations += 1
                print(f"  {record.record_id}: [{violation.code}] {violation.message}")
        print(f"checked {len(records)} pairs: {violations} violations")
    return 0 if violations == 0 else 1


def _load_probe_samples(path: str) -> list[probe.ProbeSample]:
    samples = []
    for row in _load_jsonl(path):
        samples.append(
            probe.ProbeSample(
                question_embedding=np.asarray(row["question_embedding"], dtype=float),
                prefix_embedding=np.asarray(row["prefix_embedding"], dtype=float),
                label=int(row["label"]),
            )
        )
    return samples


def _cmd_probe(cfg: _Config, argv: list[str]) -> int:
    args = cfg.args
    if args.probe_command == "train":
        samples = _load_probe_samples(args.samples)
        train_cfg = probe.TrainConfig(
            lr=cfg.get("lr", 1e-4, args.lr),
            weight_decay=cfg.get("weight_decay", 0.01, args.weight_decay),
            batch_size=cfg.get("batch_size", 64, args.batch_size),
            max_epochs=cfg.get("max_epochs", 200, args.max_epochs),
            patience=cfg.get("patience", 10, args.patience),
            seed=cfg.get("seed", 0, args.seed),
            hidden_dim=cfg.get("hidden_dim", 32, args.hidden_dim),
        )
        model, report = probe.train_probe(samples, train_cfg)
        probe.save_probe(model, args.out_model)
        payload = {
            "stop_epoch": report.stop_epoch,
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
            "pos_weight": report.pos_weight,
            "optimizer": report.optimizer,
            "train_losses": list(report.train_losses),
            "val_losses": list(report.val_losses),
            "seed": report.seed,
        }
        test_samples = [samples[i] for i in report.split_indices[2]]
        test_labels = {s.label for s in test_samples}
        if len(test_labels) == 2:
            payload["test_metrics"] = probe.evaluate_probe(model, test_samples)
        if args.report:
            reports.write_json(payload, args.report)
            _write_run_meta(cfg, Path(args.report).parent, argv)
        print(reports.canonical_json(payload), end="")
        return 0
    if args.probe_command == "eval":
        model = probe.load_probe(args.model)
        metrics = probe.evaluate_probe(model, _load_probe_samples(args.samples), args.threshold)
        print(reports.canonical_json(metrics), end="")
        return 0
    if args.probe_command == "detect":
        model = probe.load_probe(args.model)
        out = cfg.args.out or "spans.jsonl"
        rows = []
        for row in _load_jsonl(args.embeddings):
            prefixes = [
                probe.SentencePrefix(
                    embedding=np.asarray(p["embedding"], dtype=float),
                    end_token=int(p["end_token"]),
                )
                for p in row["sentence_prefixes"]
            ]
            span = probe.detect_echo_span(
                model, np.asarray(row["question_embedding"], dtype=float), prefixes
            )
            rows.append(
                {
                    "record_id": row["record_id"],
                    "detected": span is not None,
                    "start_token": 0 if span else None,
                    "end_token": span.end_token if span else None,
                    "n_tokens": span.n_tokens if span else None,
                }
            )
        with open(out, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
        print(f"wrote {len(rows)} span rows to {out}")
        return 0
    raise UsageError("probe needs a subcommand: train | eval | detect")


def _cmd_gaps(cfg: _Config, argv: list[str]) -> int:
    args = cfg.args
    records = _labeled_records(parse_trace_file(args.traces))
    results = [likelihood.echo_likelihood_gap(r) for r in records]
    labels = likelihood.labels_from_records(records)
    bin_width = cfg.get("bin_width", 10, args.bin_width)
    min_bin_count = cfg.get("min_bin_count", 5, args.min_bin_count)
    bins = likelihood.stratify(results, labels, bin_width=bin_width, min_bin_count=min_bin_count)
    report = {
        "schema_version": 1,
        "n_records": len(records),
        "n_approximate": sum(r.approximate for r in results),
        "bin_width": bin_width,
        "groups": likelihood.group_report(results, labels).to_dict(),
        "presence": likelihood.eop_presence_report(records).to_dict(),
        "results": [r.to_dict() for r in results],
    }
    out = Path(cfg.args.out or "gaps_report.json")
    reports.write_json(report, out)
    if args.csv:
        reports.write_csv(args.csv, reports.BIN_COLUMNS, reports.bin_rows(bins))
    if not args.no_figures:
        figures.save_gap_figure(bins, out.parent / f"{out.stem}_figure.png")
    _write_run_meta(cfg, out.parent, argv)
    print(f"gap report for {len(records)} records -> {out}")
    return 0


def _parse_attn_mode(mode: str) -> list[str | int]:
    if mode == "probe":
        return ["probe"]
    if mode.startswith("fixed:"):
        try:
            return [int(k) for k in mode[len("fixed:") :].split(",") if k]
        except ValueError as exc:
            raise UsageError(f"bad fixed prefix list {mode!r}") from exc
    raise UsageError(f"unknown attention mode {mode!r}")


def _cmd_attn(cfg: _Config, argv: list[str]) -> int:
    args = cfg.args
    records = _labeled_records(parse_trace_file(args.traces))
    dumps = parse_attention_dumps(args.dumps)
    labels = likelihood.labels_from_records(records)
    modes = _parse_attn_mode(cfg.get("mode", "probe", args.mode))

    series_by_metric: dict = {}
    q_series = attention.layer_series(dumps, labels, attention.METRIC_TO_QUESTION)
    series_by_metric[attention.METRIC_TO_QUESTION] = q_series
    report: dict = {"schema_version": 1, "n_dumps": len(dumps), "modes": [str(m) for m in modes]}
    report["gap_tables"] = {}
    report["discriminability"] = {}
    report["normalization_check"] = {}

    q_matrix = attention.metric_matrix(dumps, labels, attention.METRIC_TO_QUESTION)
    for mode in modes:
        key = attention.summary_key(attention.METRIC_TO_PREFIX, mode)
        p_series = attention.layer_series(dumps, labels, attention.METRIC_TO_PREFIX, mode)
        series_by_metric[key] = p_series
        table = attention.gap_table(
            {attention.METRIC_TO_QUESTION: q_series, key: p_series}
        )
        report["gap_tables"][str(mode)] = {
            metric: {row: values.to_dict() for row, values in rows.items()}
            for metric, rows in table.items()
        }
        p_matrix = attention.metric_matrix(dumps, labels, attention.METRIC_TO_PREFIX, mode)
        report["discriminability"][str(mode)] = {
            "answer->prefix": {
                name: d.to_dict()
                for name, d in attention.discriminability(
                    p_matrix[Correctness.CORRECT], p_matrix[Correctness.WRONG]
                ).items()
            },
            "answer->question": {
                name: d.to_dict()
                for name, d in attention.discriminability(
                    q_matrix[Correctness.CORRECT], q_matrix[Correctness.WRONG]
                ).items()
            },
        }
        report["normalization_check"][str(mode)] = [
            row.to_dict()
            for row in attention.normalization_check(
                p_matrix[Correctness.CORRECT], p_matrix[Correctness.WRONG]
            )
        ]

    if all(d.detail is not None for d in dumps) and dumps:
        rows_p, n_sig_p = attention.tokenwise_significance(dumps, labels, target="prefix")
        rows_q, n_sig_q = attention.tokenwise_significance(dumps, labels, target="question")
        report["tokenwise"] = {
            "prefix": {"n_significant": n_sig_p, "positions": [r.to_dict() for r in rows_p]},
            "question": {"n_significant": n_sig_q, "positions": [r.to_dict() for r in rows_q]},
        }

    out = Path(cfg.args.out or "attn_report.json")
    reports.write_json(report, out)
    if args.csv:
        reports.write_csv(args.csv, reports.LAYER_COLUMNS, reports.layer_rows(series_by_metric))
    if not args.no_figures:
        figures.save_layer_figure(series_by_metric, out.parent / f"{out.stem}_figure.png")
    _write_run_meta(cfg, out.parent, argv)
    print(f"attention report for {len(dumps)} dumps -> {out}")
    return 0


def _cmd_regress(cfg: _Config, argv: list[str]) -> int:
    args = cfg.args
    records = _labeled_records(parse_trace_file(args.traces))
    rows = []
    y = []
    for record in records:
        gap = likelihood.echo_likelihood_gap(record)
        rows.append([1.0, gap.delta_l, float(gap.removed_tokens)])
        y.append(1.0 if record.correctness is Correctness.CORRECT else 0.0)
    from . import stats as stats_mod

    result = stats_mod.logistic_irls(np.asarray(rows), np.asarray(y))
    names = ("intercept", "delta_l", "echo_tokens")
    payload = {
        "predictors": [
            {
                "name": name,
                "coefficient": result.coefficients[i],
                "std_error": result.standard_errors[i],
                "z": result.z_stats[i],
                "p": result.p_values[i],
            }
            for i, name in enumerate(names)
        ],
        "iterations": result.iterations,
        "converged": result.converged,
        "se_method": result.se_method,
        "p_method": result.p_method,
        "n": len(y),
    }
    if cfg.args.out:
        reports.write_json(payload, cfg.args.out)
        _write_run_meta(cfg, Path(cfg.args.out).parent, argv)
    print(reports.canonical_json(payload), end="")
    return 0


def _cmd_oracle(cfg: _Config, argv: list[str]) -> int:
    args = cfg.args
    if args.oracle_command != "check":
        raise UsageError("oracle needs a subcommand: check")
    seed = cfg.get("seed", 0, args.seed)
    checks = oracle.run_identity_checks(seed=seed, n_samples=args.samples)
    failed = 0
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        failed += not check.passed
        print(f"{status} {check.name}: {check.detail}")
    return 0 if failed == 0 else 1


def _client_from_args(cfg: _Config, transport) -> GenClient:
    args = cfg.args
    jobs = getattr(args, "concurrency", None) or args.jobs
    return GenClient(
        base_url=args.endpoint,
        model=args.model,
        decode=DecodeParams(
            temperature=cfg.get("temperature", 0.0, getattr(args, "temperature", None)),
            max_tokens=cfg.get("max_tokens", 1024, getattr(args, "max_tokens", None)),
            seed=cfg.get("seed", 0, args.seed),
        ),
        max_in_flight=cfg.get("jobs", 4, jobs),
        transport=transport,
    )


def _cmd_ep(cfg: _Config, argv: list[str], transport) -> int:
    args = cfg.args
    if args.ep_command != "run":
        raise UsageError("ep needs a subcommand: run")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    client = _client_from_args(cfg, transport)
    ledger = RunLedger(out_dir / "ledger.jsonl")
    ep_config = EpConfig(
        phase1_budget=args.phase1_budget,
        reminder=cfg.get("reminder", "look back at the question again", args.reminder),
    )
    questions = _load_jsonl(args.questions)
    rows = []
    for item in questions:
        result = echoic_prompting(client, item["question"], ep_config, ledger)
        row = {
            "id": item.get("id"),
            "question": result.question,
            "initial_chain": result.initial_chain,
            "final_trace": result.final_trace,
            "answer": result.answer,
            "degenerate": result.degenerate,
        }
        gold = item.get("gold")
        if gold and result.answer is not None:
            row["em_strict"] = exact_match(result.answer, gold, "strict")
            row["em_flex"] = exact_match(result.answer, gold, "flex")
        rows.append(row)
    with (out_dir / "ep_results.jsonl").open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    scored = [r for r in rows if "em_strict" in r]
    summary = {
        "n": len(rows),
        "n_scored": len(scored),
        "em_strict_pct": 100.0 * sum(r["em_strict"] for r in scored) / len(scored) if scored else None,
        "em_flex_pct": 100.0 * sum(r["em_flex"] for r in scored) / len(scored) if scored else None,
        "phase1_budget": ep_config.phase1_budget,
        "reminder": ep_config.reminder,
    }
    reports.write_json(summary, out_dir / "ep_summary.json")
    _write_run_meta(cfg, out_dir, argv)
    print(f"echoic prompting over {len(rows)} questions -> {out_dir}")
    return 0


def _cmd_reinsert(cfg: _Config, argv: list[str], transport) -> int:
    args = cfg.args
    if args.reinsert_command != "run":
        raise UsageError("reinsert needs a subcommand: run")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [r for r in parse_trace_file(args.traces) if r.correctness is Correctness.WRONG]
    if not records:
        raise UsageError("no Wrong-labeled records in the trace file")
    client = _client_from_args(cfg, transport)
    ledger = RunLedger(out_dir / "ledger.jsonl")
    results, summary = reinsertion_experiment(
        client,
        records,
        truncation=cfg.get("truncation", 0.50, args.truncation),
        insertion=cfg.get("insertion", DEFAULT_INSERTION, args.insertion),
        ledger=ledger,
    )
    with (out_dir / "interventions.jsonl").open("w", encoding="utf-8") as fh:
        for result in results:
            fh.write(json.dumps(result.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    reports.write_json(summary, out_dir / "em_summary.json")
    _write_run_meta(cfg, out_dir, argv)
    print(f"reinsertion over {summary['n_pairs']} pairs -> {out_dir}")
    return 0


def _cmd_sft(cfg: _Config, argv: list[str], transport) -> int:
    args = cfg.args
    if args.sft_command != "build":
        raise UsageError("sft needs a subcommand: build")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    client = _client_from_args(cfg, transport)
    ledger = RunLedger(out_dir / "ledger.jsonl")
    items = [(row["question"], str(row["gold"])) for row in _load_jsonl(args.questions)]
    pool, drops = sft.generate_teacher_pool(client, items, ledger=ledger)
    seed = cfg.get("seed", 0, args.seed)
    pairs, manifest = sft.build_paired_corpora(client, pool, out_dir, seed=seed, ledger=ledger)
    manifest["pool_drops"] = [d.to_dict() for d in drops]
    reports.write_json(manifest, out_dir / "manifest.json")
    _write_run_meta(cfg, out_dir, argv)
    print(f"built {len(pairs)} SFT pairs ({len(drops)} pool drops) -> {out_dir}")
    return 0


# --------------------------------------------------------------------------


def run(argv: list[str] | None = None, transport=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        if code != 0:
            print(json.dumps({"error": "usage", "message": "bad arguments"}), file=sys.stderr)
        return code
    if args.command is None:
        parser.print_help()
        return 2
    cfg = _Config(args)
    handlers = {
        "validate": lambda: _cmd_validate(cfg, argv),
        "probe": lambda: _cmd_probe(cfg, argv),
        "gaps": lambda: _cmd_gaps(cfg, argv),
        "attn": lambda: _cmd_attn(cfg, argv),
        "regress": lambda: _cmd_regress(cfg, argv),
        "oracle": lambda: _cmd_oracle(cfg, argv),
        "ep": lambda: _cmd_ep(cfg, argv, transport),
        "reinsert": lambda: _cmd_reinsert(cfg, argv, transport),
        "sft": lambda: _cmd_sft(cfg, argv, transport),
    }
    try:
        return handlers[args.command]()
    except UsageError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except EchoLensError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": "file_not_found", "message": str(exc)}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
