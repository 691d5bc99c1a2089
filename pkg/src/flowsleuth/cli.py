"""Operator command line: ingest, build-kb, label, eval, query, repl, serve.

Machine-readable JSON goes to stdout; progress and diagnostics go to
stderr, so the pipeline scripts cleanly. Exit codes: 0 success (including
undecidable verdicts), 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import AppConfig, load_config
from .embed import build_embedder
from .errors import FlowsleuthError
from .evaluate import attach_roc, confusion, metrics, roc_auc, write_report_files
from .generation import answer_with_evidence
from .ingest import (
    annotate,
    parse_anomaly_csv,
    parse_conn_log,
    read_records_jsonl,
    write_records_jsonl,
)
from .kb import VectorStore
from .labeling import (
    RuleThresholds,
    WindowSpec,
    label_ping,
    label_syn,
    read_labels_jsonl,
    rule_baseline,
)
from .pipeline import attach_detection_labels, auto_detect, build_kb, ingest_documents
from .retrieval import extract_entities, merge_entities
from .errors import SingleClassLabels


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _cmd_ingest(args: argparse.Namespace, cfg: AppConfig) -> int:
    all_records = []
    total_errors = 0
    for path in args.input:
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            report = parse_conn_log(
                fh,
                dialect=args.format,
                source_name=path.name,
                csv_columns=cfg.ingest.csv_columns,
            )
        total_errors += len(report.errors)
        for e in report.errors:
            _err(f"{path.name}:{e.line_no}: {e.reason}")
        all_records.extend(report.records)
    if args.anomalies:
        with open(args.anomalies, "r", encoding="utf-8") as fh:
            ann = parse_anomaly_csv(fh, columns=cfg.ingest.anomaly_columns)
        for e in ann.errors:
            _err(f"{args.anomalies}:{e.line_no}: {e.reason}")
        all_records = annotate(all_records, ann.patterns)
    n = write_records_jsonl(all_records, args.output)
    _err(f"wrote {n} records to {args.output} ({total_errors} malformed lines skipped)")
    return 0


def _cmd_build_kb(args: argparse.Namespace, cfg: AppConfig) -> int:
    records = read_records_jsonl(args.records)
    if args.auto_detect:
        detections = auto_detect(records)
        records = attach_detection_labels(records, detections)
        n_flagged = sum(1 for r in records if r.label is not None)
        _err(f"auto-detection flagged {n_flagged} records")
    store_path = args.store or cfg.store_path
    store = VectorStore.create(store_path, dim=cfg.embedder.dim)
    try:
        embedder = build_embedder(cfg.embedder)
        counts = build_kb(
            store,
            records,
            embedder,
            include_counts=cfg.ingest.include_counts_in_summary,
        )
        if args.docs:
            passages = []
            for doc in args.docs:
                doc = Path(doc)
                passages.append((doc.read_text(encoding="utf-8"), {"record_id": doc.stem}))
            counts["heuristic"] = ingest_documents(store, passages, embedder)
        stats = store.stats()
    finally:
        store.close()
    _err(f"store at {store_path}: {stats.counts}")
    print(json.dumps({"store": str(store_path), "counts": stats.counts}))
    return 0


def _cmd_label(args: argparse.Namespace, cfg: AppConfig) -> int:
    records = read_records_jsonl(args.records)
    spec = WindowSpec(
        window_seconds=args.window_seconds,
        min_requests=args.min_requests,
        review_min=args.review_min,
    )
    if args.attack == "syn":
        result = label_syn(records)
    elif args.attack == "ping":
        result = label_ping(records, spec=spec, mode=args.mode)
    else:  # baseline
        result = rule_baseline(records, RuleThresholds())
    n = result.to_jsonl(args.output)
    _err(
        f"labeled {n} records ({len(result.excluded)} excluded) -> {args.output}"
    )
    return 0


def _cmd_eval(args: argparse.Namespace, cfg: AppConfig) -> int:
    labels = {rid: v for rid, (v, _) in read_labels_jsonl(args.labels).items()}
    predictions: dict[str, str] = {}
    scored: list[tuple[str, float]] = []
    with open(args.predictions, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            predictions[d["record_id"]] = d["decision"]
            if "confidence" in d:
                scored.append((d["record_id"], float(d["confidence"])))
    tally = confusion(predictions, labels)
    report = metrics(tally)
    if scored:
        try:
            points, auc = roc_auc(scored, labels)
            attach_roc(report, points, auc)
        except SingleClassLabels as exc:
            _err(f"AUC not computed: {exc}")
    paths = write_report_files(report, args.output_dir)
    _err(f"wrote {', '.join(str(p) for p in paths.values())}")
    print(json.dumps(report.to_json_dict(), sort_keys=True))
    return 0


def _open_engine(cfg: AppConfig, store_path: str | None):
    from .service import Engine

    path = store_path or cfg.store_path
    store = VectorStore.open(path, readonly=True)
    return Engine(cfg, store)


def _cmd_query(args: argparse.Namespace, cfg: AppConfig) -> int:
    engine = _open_engine(cfg, args.store)
    try:
        verdict, retrieval = engine.answer(args.question)
    finally:
        engine.store.close()
    print(json.dumps(verdict.to_json_dict(), sort_keys=True))
    _err(f"gate={retrieval.gate} stages={retrieval.stage_counts}")
    return 0


def _cmd_repl(args: argparse.Namespace, cfg: AppConfig) -> int:
    engine = _open_engine(cfg, args.store)
    _err("flowsleuth repl; empty line or Ctrl-D exits")
    history: list[str] = []
    try:
        while True:
            try:
                line = input("? ").strip()
            except EOFError:
                break
            if not line:
                break
            entity_sets = [extract_entities(q) for q in history]
            entity_sets.append(extract_entities(line))
            verdict, retrieval = engine.answer(
                line, entities=merge_entities(*entity_sets)
            )
            history.append(line)
            print(json.dumps(verdict.to_json_dict(), sort_keys=True))
            _err(f"gate={retrieval.gate} stages={retrieval.stage_counts}")
            for item in retrieval.items:
                if item.entry.entry_id in verdict.citations:
                    _err(f"  [{item.entry.entry_id}] {item.entry.summary}")
    finally:
        engine.store.close()
    return 0


def _cmd_serve(args: argparse.Namespace, cfg: AppConfig) -> int:
    import uvicorn

    from .service import build_service

    app, _, _ = build_service(cfg)
    host = args.host or cfg.service.host
    port = args.port or cfg.service.port
    _err(f"serving on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowsleuth",
        description="Evidence-grounded network traffic forensics.",
    )
    parser.add_argument("--config", help="JSON or TOML config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse conn logs to canonical record JSON-lines")
    p.add_argument("--input", nargs="+", required=True, help="conn log files")
    p.add_argument("--format", choices=("zeek-tsv", "csv"), default="zeek-tsv")
    p.add_argument("--anomalies", help="anomaly CSV to join onto records")
    p.add_argument("--output", required=True, help="records JSON-lines output path")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("build-kb", help="summarize, embed, and index records")
    p.add_argument("--records", required=True, help="records JSON-lines input")
    p.add_argument("--store", help="store directory (default from config)")
    p.add_argument("--docs", nargs="*", help="reference text files for the heuristic collection")
    p.add_argument(
        "--auto-detect",
        action="store_true",
        help="run the rule detectors and route their hits to the anomaly collection",
    )
    p.set_defaults(func=_cmd_build_kb)

    p = sub.add_parser("label", help="produce ground-truth/expert/baseline labels")
    p.add_argument("--records", required=True)
    p.add_argument("--attack", choices=("syn", "ping", "baseline"), required=True)
    p.add_argument("--mode", choices=("ground_truth", "expert"), default="ground_truth")
    p.add_argument("--window-seconds", type=float, default=20.0)
    p.add_argument("--min-requests", type=int, default=10)
    p.add_argument("--review-min", type=int, default=5)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("eval", help="score predictions against labels")
    p.add_argument("--predictions", required=True, help="JSON-lines {record_id, decision[, confidence]}")
    p.add_argument("--labels", required=True, help="labels JSON-lines from `label`")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("query", help="answer one question against a store")
    p.add_argument("--store", help="store directory (default from config)")
    p.add_argument("--question", required=True)
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("repl", help="interactive query loop with in-process session")
    p.add_argument("--store", help="store directory (default from config)")
    p.set_defaults(func=_cmd_repl)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except FlowsleuthError as exc:
        _err(f"error: {exc}")
        return 1
    except OSError as exc:
        _err(f"error: {exc}")
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
