"""Glue from parsed records to a populated store.

Summaries route to collections by their hint: labeled non-benign records
become anomaly entries, everything else telemetry; reference passages land
in the heuristic collection. Entry ids are namespaced by collection
("t:"/"a:"/"h:" + record id) so citations resolve unambiguously.

The detectors double as the auto-detection feed for the anomaly collection:
their attack firings can be attached to records as annotations before the
store is built.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Iterable, Mapping, Sequence

from .embed import Embedder
from .ingest import AnomalyAnnotation, TrafficRecord
from .kb import KBEntry, Metadata, VectorStore
from .labeling import (
    LabelingResult,
    WindowSpec,
    label_ping,
    label_syn,
)
from .summarize import Summary, summarize_document, summarize_record

ENTRY_PREFIX = {"telemetry": "t:", "anomaly": "a:", "heuristic": "h:"}


def record_metadata(r: TrafficRecord) -> Metadata:
    return Metadata(
        record_id=r.record_id,
        src_ip=r.src_ip,
        dst_ip=r.dst_ip,
        src_port=r.src_port,
        dst_port=r.dst_port,
        proto=r.proto,
        ts=r.ts,
        label=r.label.taxonomy if r.label else None,
        heuristic_code=r.label.heuristic_code if r.label else None,
        severity=r.label.severity if r.label else None,
    )


def build_kb(
    store: VectorStore,
    records: Sequence[TrafficRecord],
    embedder: Embedder,
    include_counts: bool = True,
    batch_size: int = 256,
) -> dict[str, int]:
    """Summarize, embed, and upsert records; returns per-collection counts."""
    routed: dict[str, list[tuple[TrafficRecord, Summary]]] = {
        "telemetry": [],
        "anomaly": [],
    }
    for r in records:
        s = summarize_record(r, include_counts=include_counts)
        routed[s.source_collection_hint].append((r, s))

    counts = {"telemetry": 0, "anomaly": 0}
    for collection, pairs in routed.items():
        prefix = ENTRY_PREFIX[collection]
        for i in range(0, len(pairs), batch_size):
            batch = pairs[i : i + batch_size]
            vectors = embedder.embed_batch([s.text for _, s in batch])
            entries = [
                KBEntry(
                    entry_id=prefix + r.record_id,
                    summary=s.text,
                    vector=vec,
                    meta=record_metadata(r),
                )
                for (r, s), vec in zip(batch, vectors)
            ]
            counts[collection] += store.upsert(collection, entries)
    return counts


def ingest_documents(
    store: VectorStore,
    passages: Iterable[tuple[str, Mapping[str, str]]],
    embedder: Embedder,
) -> int:
    """Chunk and index reference passages into the heuristic collection.

    Passage metadata may carry record_id (the entry id stem), proto, label,
    and heuristic_code tags used by the lenient heuristic-collection filter.
    """
    total = 0
    for passage, meta in passages:
        chunks = summarize_document(passage, metadata=meta)
        vectors = embedder.embed_batch([c.text for c in chunks])
        entries = []
        for chunk, vec in zip(chunks, vectors):
            code = meta.get("heuristic_code")
            entries.append(
                KBEntry(
                    entry_id=ENTRY_PREFIX["heuristic"] + chunk.record_id,
                    summary=chunk.text,
                    vector=vec,
                    meta=Metadata(
                        record_id=chunk.record_id,
                        proto=meta.get("proto"),
                        label=meta.get("label"),
                        heuristic_code=int(code) if code is not None else None,
                    ),
                )
            )
        total += store.upsert("heuristic", entries)
    return total


_RULE_TAXONOMY = (
    ("s0", "syn-flood"),
    ("window", "ping-flood"),
    ("heuristic-20", "ping-flood"),
)


def _taxonomy_for_rule(rule: str) -> str:
    lowered = rule.lower()
    for prefix, taxonomy in _RULE_TAXONOMY:
        if lowered.startswith(prefix):
            return taxonomy
    return "anomaly"


def auto_detect(
    records: Sequence[TrafficRecord],
    window: WindowSpec = WindowSpec(),
) -> LabelingResult:
    """Run both rule detectors and merge their firings."""
    merged = LabelingResult()
    syn = label_syn(records)
    ping = label_ping(records, spec=window)
    merged.instances = syn.instances + ping.instances
    merged.excluded = syn.excluded + ping.excluded
    return merged


def attach_detection_labels(
    records: Sequence[TrafficRecord],
    detections: LabelingResult,
    severity: str = "suspicious",
) -> list[TrafficRecord]:
    """Turn attack firings into anomaly annotations on their records.

    Auto-detected instances get the conservative "suspicious" severity; the
    taxonomy names the attack family implied by the fired rule. Records
    that already carry a label keep it.
    """
    per_record = detections.per_record()
    out = []
    for r in records:
        hit = per_record.get(r.record_id)
        if hit is None or hit[0] != "attack" or r.label is not None:
            out.append(r)
            continue
        annotation = AnomalyAnnotation(
            severity=severity,
            taxonomy=_taxonomy_for_rule(hit[1]),
        )
        out.append(replace(r, label=annotation))
    return out
