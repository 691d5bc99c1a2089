"""Deterministic one-sentence summaries of traffic records.

Every record renders to byte-identical text on every call, exposing the
endpoints, protocol, timing, and labels so that cited evidence stays
human-checkable. Document passages destined for the heuristic collection
pass through (chunked) unchanged.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping

from .errors import EmptyPassage
from .ingest import TrafficRecord, epoch_us_to_datetime

_MONTHS = (
    "January", "February", "March", "April", "May", "June",
    "July", "August", "September", "October", "November", "December",
)

HINT_TELEMETRY = "telemetry"
HINT_ANOMALY = "anomaly"
HINT_HEURISTIC = "heuristic"

DOC_CHUNK_SIZE = 1000
DOC_CHUNK_OVERLAP = 100


@dataclass(frozen=True)
class Summary:
    record_id: str
    text: str
    source_collection_hint: str


def _render_when(ts: int) -> tuple[str, str]:
    """Epoch microseconds -> ("HH:MM:SS[.ffffff]", "Month D, YYYY") in UTC.

    Fractional seconds are appended only when nonzero so that summaries of
    sub-second events stay distinct.
    """
    dt = epoch_us_to_datetime(ts)
    time_s = f"{dt.hour:02d}:{dt.minute:02d}:{dt.second:02d}"
    if dt.microsecond:
        time_s += f".{dt.microsecond:06d}"
    date_s = f"{_MONTHS[dt.month - 1]} {dt.day}, {dt.year}"
    return time_s, date_s


def _icmp_type_name(icmp_type: int | None) -> str:
    if icmp_type == 8:
        return "request"
    if icmp_type == 0:
        return "reply"
    if icmp_type is None:
        return "message"
    return f"type-{icmp_type} message"


def _flag_clause(r: TrafficRecord) -> str:
    if r.label is None or r.label.severity == "benign":
        return ""
    if r.label.taxonomy:
        return f", flagged as a potential {r.label.taxonomy} anomaly"
    return ", flagged as a potential anomaly"


def _endpoint(ip: str, port: int | None) -> str:
    return f"{ip}:{port}" if port is not None else ip


def _counts_clause(r: TrafficRecord) -> str:
    if r.bytes_orig is None and r.bytes_resp is None:
        return ""
    bo = r.bytes_orig if r.bytes_orig is not None else 0
    br = r.bytes_resp if r.bytes_resp is not None else 0
    return f" ({bo} bytes out, {br} bytes back)"


def summarize_record(r: TrafficRecord, include_counts: bool = True) -> Summary:
    """Render one record into its canonical sentence.

    The template is chosen by protocol; labeled non-benign records gain a
    "flagged as a potential ... anomaly" clause and an anomaly-collection
    hint. include_counts controls the byte-count parenthetical on tcp/udp
    sentences.
    """
    time_s, date_s = _render_when(r.ts)
    flag = _flag_clause(r)
    counts = _counts_clause(r) if include_counts else ""

    if r.proto == "icmp":
        text = (
            f"At {time_s} on {date_s}, host {r.src_ip} sent an ICMP "
            f"{_icmp_type_name(r.icmp_type)} to {r.dst_ip}{flag}."
        )
    elif r.proto == "tcp":
        state = f" ending in state {r.conn_state}" if r.conn_state else ""
        text = (
            f"At {time_s} on {date_s}, host {_endpoint(r.src_ip, r.src_port)} "
            f"opened a TCP connection to {_endpoint(r.dst_ip, r.dst_port)}"
            f"{state}{counts}{flag}."
        )
    elif r.proto == "udp":
        text = (
            f"At {time_s} on {date_s}, host {_endpoint(r.src_ip, r.src_port)} "
            f"sent UDP traffic to {_endpoint(r.dst_ip, r.dst_port)}{counts}{flag}."
        )
    else:
        text = (
            f"At {time_s} on {date_s}, host {r.src_ip} sent {r.proto.upper()} "
            f"traffic to {r.dst_ip}{flag}."
        )

    hint = (
        HINT_ANOMALY
        if r.label is not None and r.label.severity != "benign"
        else HINT_TELEMETRY
    )
    return Summary(record_id=r.record_id, text=text, source_collection_hint=hint)


def summarize_document(
    passage: str,
    metadata: Mapping[str, str] | None = None,
    chunk_size: int = DOC_CHUNK_SIZE,
    overlap: int = DOC_CHUNK_OVERLAP,
) -> list[Summary]:
    """Pass a reference passage through as heuristic-collection summaries.

    Passages longer than chunk_size are split into overlapping windows so
    the pieces recompose to the original: chunk[0] + chunk[1][overlap:] +
    ... == passage.
    """
    if not passage.strip():
        raise EmptyPassage("document passage is empty")
    if overlap >= chunk_size:
        raise ValueError("overlap must be smaller than chunk_size")

    metadata = metadata or {}
    base_id = metadata.get("record_id") or (
        "doc-" + hashlib.sha256(passage.encode("utf-8")).hexdigest()[:12]
    )

    chunks: list[str] = []
    i = 0
    while True:
        chunks.append(passage[i : i + chunk_size])
        if i + chunk_size >= len(passage):
            break
        i += chunk_size - overlap

    if len(chunks) == 1:
        return [Summary(record_id=base_id, text=passage, source_collection_hint=HINT_HEURISTIC)]
    return [
        Summary(record_id=f"{base_id}#c{n}", text=chunk, source_collection_hint=HINT_HEURISTIC)
        for n, chunk in enumerate(chunks)
    ]
