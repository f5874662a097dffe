"""Extractor command line: run extractions, emit probe-feature embeddings."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ExtractorError
from .extract import probe_inputs, run_extraction
from .runtime import load_model


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="echo-lens-extract", description=__doc__)
    sub = root.add_subparsers(dest="command")

    p = sub.add_parser("run", help="score traces and dump attention aggregates")
    p.add_argument("--model", required=True, help="'tiny[:seed]' or a HF model id")
    p.add_argument("--input", required=True, help="raw rows: record_id, question, trace, ...")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("summary", "detail"), default="summary")
    p.add_argument("--fixed-k", default="32,64,128")
    p.add_argument("--no-resume", action="store_true")

    p = sub.add_parser("embed", help="emit probe-detection embedding rows")
    p.add_argument("--input", required=True)
    p.add_argument("--embedder", default="hash:64")
    p.add_argument("--out", required=True)
    return root


def _load_rows(path: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        if args.command == "run":
            rows = _load_rows(args.input)
            corpus = [r["question"] for r in rows] + [r["trace"] for r in rows]
            xm = load_model(args.model, corpus=corpus)
            out_dir = Path(args.out_dir)
            fixed_k = [int(k) for k in args.fixed_k.split(",") if k]
            written = run_extraction(
                xm,
                rows,
                out_dir / "traces.jsonl",
                out_dir / "dumps.jsonl",
                fixed_k=fixed_k,
                mode=args.mode,
                resume=not args.no_resume,
            )
            meta = {
                "model": xm.name,
                "n_layers": xm.n_layers,
                "mode": args.mode,
                "fixed_k": fixed_k,
                "records_written": written,
            }
            (out_dir / "extract_meta.json").write_text(
                json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
            )
            print(f"extracted {written} records -> {out_dir}")
            return 0
        if args.command == "embed":
            rows = _load_rows(args.input)
            out_rows = probe_inputs(args.embedder, rows)
            with open(args.out, "w", encoding="utf-8") as fh:
                for row in out_rows:
                    fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
            print(f"embedded {len(out_rows)} records -> {args.out}")
            return 0
        return 2
    except ExtractorError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
