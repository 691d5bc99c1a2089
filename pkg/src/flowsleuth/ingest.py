"""Connection-log and anomaly-CSV ingestion.

Normalizes Zeek-style TSV conn logs and header CSVs into TrafficRecord,
the canonical schema every downstream module consumes, and joins MAWILab-style
anomaly annotations onto records by 5-tuple pattern matching.

Timestamps are stored as UTC epoch microseconds. Junk lines are collected as
MalformedLine reports rather than aborting the file; a missing required
column is fatal for the file.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import MissingRequiredColumn

log = logging.getLogger(__name__)

SEVERITIES = ("anomalous", "suspicious", "notice", "benign")

# Zeek conn_state values treated as first-class; anything else is preserved
# verbatim as an "other" state string.
KNOWN_CONN_STATES = ("S0", "SF", "SH", "RSTR", "RSTO", "OTH")

_UNSET_DEFAULT = "-"
_EMPTY_DEFAULT = "(empty)"

_IPV4_RE = re.compile(r"^(?:\d{1,3}\.){3}\d{1,3}$")
_EPOCH_RE = re.compile(r"^-?\d+(?:\.\d+)?$")


@dataclass(frozen=True)
class AnomalyAnnotation:
    """One anomaly label: heuristic/taxonomy codes plus a severity class."""

    severity: str
    heuristic_code: int | None = None
    taxonomy: str | None = None
    anomaly_id: str | None = None

    def __post_init__(self):
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity: {self.severity!r}")
        if self.heuristic_code is not None and self.heuristic_code < 0:
            raise ValueError("heuristic_code must be >= 0")


@dataclass(frozen=True)
class TrafficRecord:
    """One normalized connection/flow event.

    ts is UTC epoch microseconds. Ports are only meaningful for tcp/udp;
    for icmp the type/code pair takes their place (Zeek stores ICMP
    type/code in the port columns, and the parser undoes that).
    """

    ts: int
    src_ip: str
    dst_ip: str
    proto: str
    record_id: str
    src_port: int | None = None
    dst_port: int | None = None
    conn_state: str | None = None
    icmp_type: int | None = None
    icmp_code: int | None = None
    bytes_orig: int | None = None
    bytes_resp: int | None = None
    pkts_orig: int | None = None
    pkts_resp: int | None = None
    label: AnomalyAnnotation | None = None


@dataclass(frozen=True)
class FiveTuplePattern:
    """Match pattern for annotation rows; None fields are wildcards."""

    src_ip: str | None = None
    dst_ip: str | None = None
    src_port: int | None = None
    dst_port: int | None = None
    proto: str | None = None

    def matches(self, r: TrafficRecord) -> bool:
        if self.src_ip is not None and r.src_ip != self.src_ip:
            return False
        if self.dst_ip is not None and r.dst_ip != self.dst_ip:
            return False
        if self.src_port is not None and r.src_port != self.src_port:
            return False
        if self.dst_port is not None and r.dst_port != self.dst_port:
            return False
        if self.proto is not None and r.proto != self.proto:
            return False
        return True


@dataclass(frozen=True)
class MalformedLine:
    line_no: int
    reason: str


@dataclass
class ParseReport:
    """Parsed records plus the junk lines skipped along the way."""

    records: list[TrafficRecord]
    errors: list[MalformedLine]


@dataclass
class AnnotationReport:
    patterns: list[tuple[FiveTuplePattern, AnomalyAnnotation]]
    errors: list[MalformedLine]


def parse_timestamp(value: str) -> int:
    """Parse an epoch float (Zeek style) or ISO-8601 string to epoch microseconds.

    Epoch values go through Decimal so fractional seconds survive exactly.
    Naive ISO timestamps are taken as UTC.
    """
    value = value.strip()
    if _EPOCH_RE.match(value):
        try:
            return int(Decimal(value) * 1_000_000)
        except InvalidOperation as exc:  # pragma: no cover - regex guards this
            raise ValueError(f"bad epoch timestamp: {value!r}") from exc
    iso = value
    if iso.endswith("Z"):
        iso = iso[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(iso)
    except ValueError as exc:
        raise ValueError(f"unparseable timestamp: {value!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.replace(microsecond=0).timestamp()) * 1_000_000 + dt.microsecond


def epoch_us_to_datetime(ts: int) -> datetime:
    return datetime.fromtimestamp(ts // 1_000_000, tz=timezone.utc).replace(
        microsecond=ts % 1_000_000
    )


# Canonical field -> default CSV column name. Overridable through the
# ingest.csv_columns config table because anomaly/flow CSV headers vary
# between captures.
DEFAULT_CSV_COLUMNS: dict[str, str] = {
    "ts": "ts",
    "uid": "uid",
    "src_ip": "src_ip",
    "src_port": "src_port",
    "dst_ip": "dst_ip",
    "dst_port": "dst_port",
    "proto": "proto",
    "conn_state": "conn_state",
    "icmp_type": "icmp_type",
    "icmp_code": "icmp_code",
    "bytes_orig": "bytes_orig",
    "bytes_resp": "bytes_resp",
    "pkts_orig": "pkts_orig",
    "pkts_resp": "pkts_resp",
}

# Zeek conn.log column names for the same canonical fields.
ZEEK_COLUMNS: dict[str, str] = {
    "ts": "ts",
    "uid": "uid",
    "src_ip": "id.orig_h",
    "src_port": "id.orig_p",
    "dst_ip": "id.resp_h",
    "dst_port": "id.resp_p",
    "proto": "proto",
    "conn_state": "conn_state",
    "bytes_orig": "orig_bytes",
    "bytes_resp": "resp_bytes",
    "pkts_orig": "orig_pkts",
    "pkts_resp": "resp_pkts",
}

_REQUIRED_FIELDS = ("ts", "src_ip", "dst_ip", "proto")


def _decode_separator(token: str) -> str:
    # Zeek writes "#separator \x09"; the escape may arrive literally.
    if token.startswith("\\x") and len(token) == 4:
        return chr(int(token[2:], 16))
    return token


def _is_unset(value: str, unset: str, empty: str) -> bool:
    return value == "" or value == unset or value == empty


def _parse_int(value: str, name: str, lo: int = 0, hi: int | None = None) -> int:
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"{name} is not an integer: {value!r}")
    if n < lo or (hi is not None and n > hi):
        raise ValueError(f"{name} out of range: {n}")
    return n


def _build_record(
    fields: Mapping[str, str],
    line_no: int,
    source_name: str,
    unset: str = _UNSET_DEFAULT,
    empty: str = _EMPTY_DEFAULT,
) -> TrafficRecord:
    """Assemble a TrafficRecord from canonical-field -> raw-cell values.

    Raises ValueError with a human reason for any malformed cell; callers
    convert that into a MalformedLine report.
    """

    def cell(name: str) -> str | None:
        v = fields.get(name)
        if v is None:
            return None
        v = v.strip()
        if _is_unset(v, unset, empty):
            return None
        return v

    ts_raw = cell("ts")
    if ts_raw is None:
        raise ValueError("timestamp is unset")
    ts = parse_timestamp(ts_raw)

    src_ip = cell("src_ip")
    dst_ip = cell("dst_ip")
    if not src_ip or not dst_ip:
        raise ValueError("source or destination address is unset")

    proto_raw = cell("proto")
    if not proto_raw:
        raise ValueError("protocol is unset")
    proto = proto_raw.lower()

    src_port = dst_port = None
    icmp_type = icmp_code = None
    sp_raw, dp_raw = cell("src_port"), cell("dst_port")
    if proto == "icmp":
        # Zeek stores ICMP type/code in the port columns.
        t_raw = cell("icmp_type") or sp_raw
        c_raw = cell("icmp_code") or dp_raw
        if t_raw is not None:
            icmp_type = _parse_int(t_raw, "icmp_type", 0, 255)
        if c_raw is not None:
            icmp_code = _parse_int(c_raw, "icmp_code", 0, 255)
    elif proto in ("tcp", "udp"):
        if sp_raw is not None:
            src_port = _parse_int(sp_raw, "src_port", 0, 65535)
        if dp_raw is not None:
            dst_port = _parse_int(dp_raw, "dst_port", 0, 65535)
    # other protocols carry neither ports nor icmp fields

    state_raw = cell("conn_state")
    conn_state = state_raw if state_raw else None

    counts = {}
    for name in ("bytes_orig", "bytes_resp", "pkts_orig", "pkts_resp"):
        raw = cell(name)
        counts[name] = None if raw is None else _parse_int(raw, name, 0)

    uid = cell("uid")
    record_id = uid if uid else f"{source_name}:{line_no}"

    return TrafficRecord(
        ts=ts,
        src_ip=src_ip,
        dst_ip=dst_ip,
        proto=proto,
        record_id=record_id,
        src_port=src_port,
        dst_port=dst_port,
        conn_state=conn_state,
        icmp_type=icmp_type,
        icmp_code=icmp_code,
        bytes_orig=counts["bytes_orig"],
        bytes_resp=counts["bytes_resp"],
        pkts_orig=counts["pkts_orig"],
        pkts_resp=counts["pkts_resp"],
    )


def parse_conn_log(
    lines: Iterable[str],
    dialect: str = "zeek-tsv",
    source_name: str = "conn",
    csv_columns: Mapping[str, str] | None = None,
) -> ParseReport:
    """Parse a connection log into TrafficRecords.

    dialect "zeek-tsv": tab-separated with `#separator`/`#fields` headers,
    `-` meaning unset. dialect "csv": comma-separated with a header row;
    column names come from `csv_columns` (canonical field -> column name),
    defaulting to DEFAULT_CSV_COLUMNS.

    Malformed data lines are collected, not fatal; a missing required
    column raises MissingRequiredColumn.
    """
    if dialect == "zeek-tsv":
        return _parse_zeek_tsv(lines, source_name)
    if dialect == "csv":
        return _parse_csv(lines, source_name, csv_columns or DEFAULT_CSV_COLUMNS)
    raise ValueError(f"unknown conn log dialect: {dialect!r}")


def _parse_zeek_tsv(lines: Iterable[str], source_name: str) -> ParseReport:
    records: list[TrafficRecord] = []
    errors: list[MalformedLine] = []
    sep = "\t"
    unset = _UNSET_DEFAULT
    empty = _EMPTY_DEFAULT
    columns: list[str] | None = None

    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line:
            continue
        if line.startswith("#"):
            parts = line.split(sep) if sep in line else line.split()
            directive = parts[0]
            if directive == "#separator" and len(parts) > 1:
                sep = _decode_separator(parts[1])
            elif directive == "#fields":
                columns = [c for c in parts[1:] if c]
            elif directive == "#unset_field" and len(parts) > 1:
                unset = parts[1]
            elif directive == "#empty_field" and len(parts) > 1:
                empty = parts[1]
            # #types, #open, #close, #path: ignored
            continue
        if columns is None:
            raise MissingRequiredColumn("#fields")
        cells = line.split(sep)
        if len(cells) != len(columns):
            errors.append(
                MalformedLine(line_no, f"expected {len(columns)} columns, got {len(cells)}")
            )
            continue
        row = dict(zip(columns, cells))
        fields = {canon: row[col] for canon, col in ZEEK_COLUMNS.items() if col in row}
        missing = [ZEEK_COLUMNS[f] for f in _REQUIRED_FIELDS if f not in fields]
        if missing:
            raise MissingRequiredColumn(missing[0])
        try:
            records.append(_build_record(fields, line_no, source_name, unset, empty))
        except ValueError as exc:
            errors.append(MalformedLine(line_no, str(exc)))
    return ParseReport(records, errors)


def _parse_csv(
    lines: Iterable[str], source_name: str, columns: Mapping[str, str]
) -> ParseReport:
    records: list[TrafficRecord] = []
    errors: list[MalformedLine] = []
    reader = csv.reader(lines)
    header: list[str] | None = None
    line_no = 0
    for row in reader:
        line_no += 1
        if header is None:
            header = [c.strip() for c in row]
            col_index = {name: i for i, name in enumerate(header)}
            missing = [
                columns[f]
                for f in _REQUIRED_FIELDS
                if columns.get(f) not in col_index
            ]
            if missing:
                raise MissingRequiredColumn(missing[0])
            continue
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            errors.append(
                MalformedLine(line_no, f"expected {len(header)} columns, got {len(row)}")
            )
            continue
        named = dict(zip(header, row))
        fields = {
            canon: named[col] for canon, col in columns.items() if col in named
        }
        try:
            records.append(_build_record(fields, line_no, source_name, unset="-", empty=""))
        except ValueError as exc:
            errors.append(MalformedLine(line_no, str(exc)))
    if header is None:
        raise MissingRequiredColumn("header row")
    return ParseReport(records, errors)


# MAWILab-style anomaly CSV: canonical field -> default column name.
DEFAULT_ANOMALY_COLUMNS: dict[str, str] = {
    "anomaly_id": "anomalyID",
    "src_ip": "srcIP",
    "src_port": "srcPort",
    "dst_ip": "dstIP",
    "dst_port": "dstPort",
    "proto": "proto",
    "taxonomy": "taxonomy",
    "heuristic": "heuristic",
    "label": "label",
}

_WILDCARDS = ("", "-", "*")


def parse_anomaly_csv(
    lines: Iterable[str], columns: Mapping[str, str] | None = None
) -> AnnotationReport:
    """Parse an anomaly CSV into (pattern, annotation) pairs, row order preserved.

    Any pattern field may be wildcard ("", "-", "*"). Unknown severity values
    map to "suspicious" with a warning -- a conservative default.
    """
    columns = columns or DEFAULT_ANOMALY_COLUMNS
    out: list[tuple[FiveTuplePattern, AnomalyAnnotation]] = []
    errors: list[MalformedLine] = []
    reader = csv.reader(lines)
    header: list[str] | None = None
    line_no = 0
    for row in reader:
        line_no += 1
        if header is None:
            header = [c.strip() for c in row]
            continue
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            errors.append(
                MalformedLine(line_no, f"expected {len(header)} columns, got {len(row)}")
            )
            continue
        named = dict(zip(header, row))

        def cell(field: str) -> str | None:
            col = columns.get(field)
            if col is None or col not in named:
                return None
            v = named[col].strip()
            return None if v in _WILDCARDS else v

        try:
            pattern = FiveTuplePattern(
                src_ip=cell("src_ip"),
                dst_ip=cell("dst_ip"),
                src_port=_opt_port(cell("src_port")),
                dst_port=_opt_port(cell("dst_port")),
                proto=(cell("proto") or "").lower() or None,
            )
            heuristic_raw = cell("heuristic")
            heuristic = (
                _parse_int(heuristic_raw, "heuristic", 0) if heuristic_raw else None
            )
            severity_raw = (cell("label") or "").lower()
            if severity_raw in SEVERITIES:
                severity = severity_raw
            else:
                log.warning(
                    "unknown severity %r on line %d; defaulting to suspicious",
                    severity_raw,
                    line_no,
                )
                severity = "suspicious"
            annotation = AnomalyAnnotation(
                severity=severity,
                heuristic_code=heuristic,
                taxonomy=cell("taxonomy"),
                anomaly_id=cell("anomaly_id"),
            )
        except ValueError as exc:
            errors.append(MalformedLine(line_no, str(exc)))
            continue
        out.append((pattern, annotation))
    if header is None:
        raise MissingRequiredColumn("header row")
    return AnnotationReport(out, errors)


def _opt_port(raw: str | None) -> int | None:
    return None if raw is None else _parse_int(raw, "port", 0, 65535)


def annotate(
    records: Iterable[TrafficRecord],
    annotations: Iterable[tuple[FiveTuplePattern, AnomalyAnnotation]],
) -> list[TrafficRecord]:
    """Attach to each record the annotation of the first matching pattern.

    First-in-file order wins; records with no match keep their label.
    Idempotent: re-annotating replaces a label with the same value.
    """
    pats = list(annotations)
    out = []
    for r in records:
        hit = next((ann for pat, ann in pats if pat.matches(r)), None)
        out.append(replace(r, label=hit) if hit is not None else r)
    return out


# ---------------------------------------------------------------------------
# Canonical record JSON-lines interchange format
# ---------------------------------------------------------------------------

_RECORD_FIELD_ORDER = (
    "ts",
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "proto",
    "conn_state",
    "icmp_type",
    "icmp_code",
    "bytes_orig",
    "bytes_resp",
    "pkts_orig",
    "pkts_resp",
    "label",
    "record_id",
)


def record_to_dict(r: TrafficRecord) -> dict:
    d: dict = {}
    for name in _RECORD_FIELD_ORDER:
        if name == "label":
            d["label"] = (
                None
                if r.label is None
                else {
                    "heuristic_code": r.label.heuristic_code,
                    "taxonomy": r.label.taxonomy,
                    "severity": r.label.severity,
                    "anomaly_id": r.label.anomaly_id,
                }
            )
        else:
            d[name] = getattr(r, name)
    return d


def record_from_dict(d: Mapping) -> TrafficRecord:
    label = d.get("label")
    ann = (
        None
        if label is None
        else AnomalyAnnotation(
            severity=label["severity"],
            heuristic_code=label.get("heuristic_code"),
            taxonomy=label.get("taxonomy"),
            anomaly_id=label.get("anomaly_id"),
        )
    )
    return TrafficRecord(
        ts=int(d["ts"]),
        src_ip=d["src_ip"],
        dst_ip=d["dst_ip"],
        proto=d["proto"],
        record_id=d["record_id"],
        src_port=d.get("src_port"),
        dst_port=d.get("dst_port"),
        conn_state=d.get("conn_state"),
        icmp_type=d.get("icmp_type"),
        icmp_code=d.get("icmp_code"),
        bytes_orig=d.get("bytes_orig"),
        bytes_resp=d.get("bytes_resp"),
        pkts_orig=d.get("pkts_orig"),
        pkts_resp=d.get("pkts_resp"),
        label=ann,
    )


def write_records_jsonl(records: Iterable[TrafficRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_dict(r), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_records_jsonl(path: str | Path) -> list[TrafficRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_dict(json.loads(line)))
    return out


def iter_records_jsonl(path: str | Path) -> Iterator[TrafficRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield record_from_dict(json.loads(line))
