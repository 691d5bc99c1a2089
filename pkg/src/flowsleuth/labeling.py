"""Ground-truth and expert-rule labelers for SYN floods and ping floods.

SYN labeling is pointwise over TCP connection states: S0 (SYN sent, no
reply) is the flood signature, the completed/benign states are negative,
and anything else is excluded but reported. Ping labeling slides a window
over ICMP echo requests per directional (src, dst) pair: a window is any
interval [t, t + window] anchored at an event, counting inclusively at both
ends. Ground-truth mode also evaluates per-src and per-dst aggregate
windows (one-to-many and many-to-one flooding) and trusts heuristic-20
annotations; expert mode adds the 5-9 review band.

Excluded records are always reported, never silently dropped -- evaluation
denominators must stay auditable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import AnomalyAnnotation, FiveTuplePattern, TrafficRecord, annotate

VERDICT_ATTACK = "attack"
VERDICT_BENIGN = "benign"
VERDICT_REVIEW = "review"

_VERDICT_RANK = {VERDICT_ATTACK: 2, VERDICT_REVIEW: 1, VERDICT_BENIGN: 0}

BENIGN_CONN_STATES = ("SH", "SF", "RSTR", "RSTO", "OTH")

PING_FLOOD_HEURISTIC = 20


@dataclass(frozen=True)
class WindowSpec:
    """Sliding-window thresholds for the ping-flood rules."""

    window_seconds: float = 20.0
    min_requests: int = 10
    review_min: int = 5

    def __post_init__(self):
        if not self.min_requests > self.review_min > 0:
            raise ValueError("need min_requests > review_min > 0")
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")

    @property
    def window_us(self) -> int:
        return int(self.window_seconds * 1_000_000)


@dataclass(frozen=True)
class LabeledInstance:
    """One rule firing: the records it covers, the verdict, the rule name."""

    record_ids: tuple[str, ...]
    verdict: str
    rule_fired: str


@dataclass
class LabelingResult:
    """Rule firings plus the records that were out of scope.

    Instances may overlap (a record can sit in several windows); use
    per_record() for the resolved per-record verdicts, where attack beats
    review beats benign.
    """

    instances: list[LabeledInstance] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def per_record(self) -> dict[str, tuple[str, str]]:
        resolved: dict[str, tuple[str, str]] = {}
        for inst in self.instances:
            for rid in inst.record_ids:
                prev = resolved.get(rid)
                if prev is None or _VERDICT_RANK[inst.verdict] > _VERDICT_RANK[prev[0]]:
                    resolved[rid] = (inst.verdict, inst.rule_fired)
        return resolved

    def verdicts(self) -> dict[str, str]:
        return {rid: v for rid, (v, _) in self.per_record().items()}

    def to_jsonl(self, path: str | Path) -> int:
        resolved = self.per_record()
        n = 0
        with open(path, "w", encoding="utf-8") as fh:
            for rid in sorted(resolved):
                verdict, rule = resolved[rid]
                fh.write(
                    json.dumps(
                        {"record_id": rid, "verdict": verdict, "rule_fired": rule},
                        separators=(",", ":"),
                    )
                    + "\n"
                )
                n += 1
        return n


def read_labels_jsonl(path: str | Path) -> dict[str, tuple[str, str]]:
    out: dict[str, tuple[str, str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                d = json.loads(line)
                out[d["record_id"]] = (d["verdict"], d.get("rule_fired", ""))
    return out


def label_syn(records: Iterable[TrafficRecord]) -> LabelingResult:
    """Pointwise SYN-flood labels from TCP connection states.

    S0 -> attack; SH/SF/RSTR/RSTO/OTH -> benign; TCP with another or absent
    state, and all non-TCP records, are excluded and reported.
    """
    result = LabelingResult()
    for r in records:
        if r.proto != "tcp":
            result.excluded.append(r.record_id)
            continue
        if r.conn_state == "S0":
            result.instances.append(
                LabeledInstance((r.record_id,), VERDICT_ATTACK, "S0")
            )
        elif r.conn_state in BENIGN_CONN_STATES:
            result.instances.append(
                LabeledInstance((r.record_id,), VERDICT_BENIGN, r.conn_state)
            )
        else:
            result.excluded.append(r.record_id)
    return result


def _sorted_events(records: Iterable[TrafficRecord]) -> list[TrafficRecord]:
    return sorted(records, key=lambda r: (r.ts, r.record_id))


def window_marks(
    events: Sequence[TrafficRecord], window_us: int, min_count: int
) -> tuple[set[str], int]:
    """Record ids inside qualifying anchored windows, plus the peak count.

    events must be time-sorted. A window [ts_i, ts_i + window_us] is
    anchored at each event i; when it contains >= min_count events, every
    member is marked.
    """
    n = len(events)
    marked: set[str] = set()
    peak = 0
    j = 0
    for i in range(n):
        if j < i:
            j = i
        while j + 1 < n and events[j + 1].ts <= events[i].ts + window_us:
            j += 1
        count = j - i + 1
        if count > peak:
            peak = count
        if count >= min_count:
            for e in events[i : j + 1]:
                marked.add(e.record_id)
    return marked, peak


MODE_GROUND_TRUTH = "ground_truth"
MODE_EXPERT = "expert"


def label_ping(
    records: Iterable[TrafficRecord],
    spec: WindowSpec = WindowSpec(),
    mode: str = MODE_GROUND_TRUTH,
    annotations: Sequence[tuple[FiveTuplePattern, AnomalyAnnotation]] | None = None,
) -> LabelingResult:
    """Sliding-window ping-flood labels over ICMP echo requests.

    The labeled universe is icmp_type=8 records; everything else is
    excluded. Both modes mark attack any directional (src, dst) pair window
    holding >= min_requests requests, and any pair whose records carry
    heuristic code 20. ground_truth additionally slides the same window over
    per-src and per-dst aggregates; expert instead grades non-attack pairs
    into the review band (peak in [review_min, min_requests)) or benign.
    """
    if mode not in (MODE_GROUND_TRUTH, MODE_EXPERT):
        raise ValueError(f"unknown labeling mode: {mode!r}")
    recs = list(records)
    if annotations:
        recs = annotate(recs, annotations)

    result = LabelingResult()
    universe: list[TrafficRecord] = []
    for r in recs:
        if r.proto == "icmp" and r.icmp_type == 8:
            universe.append(r)
        else:
            result.excluded.append(r.record_id)
    universe = _sorted_events(universe)

    attack_tag = f"window>={spec.min_requests}"

    pairs: dict[tuple[str, str], list[TrafficRecord]] = {}
    for r in universe:
        pairs.setdefault((r.src_ip, r.dst_ip), []).append(r)

    pair_peaks: dict[tuple[str, str], int] = {}
    for key in sorted(pairs):
        events = pairs[key]
        marked, peak = window_marks(events, spec.window_us, spec.min_requests)
        pair_peaks[key] = peak
        if marked:
            result.instances.append(
                LabeledInstance(tuple(sorted(marked)), VERDICT_ATTACK, attack_tag)
            )
        heuristic_hit = any(
            r.label is not None and r.label.heuristic_code == PING_FLOOD_HEURISTIC
            for r in events
        )
        if heuristic_hit:
            result.instances.append(
                LabeledInstance(
                    tuple(sorted(r.record_id for r in events)),
                    VERDICT_ATTACK,
                    "heuristic-20",
                )
            )

    if mode == MODE_GROUND_TRUTH:
        for group_field, tag in (("src_ip", "per-src"), ("dst_ip", "per-dst")):
            groups: dict[str, list[TrafficRecord]] = {}
            for r in universe:
                groups.setdefault(getattr(r, group_field), []).append(r)
            for key in sorted(groups):
                marked, _ = window_marks(groups[key], spec.window_us, spec.min_requests)
                if marked:
                    result.instances.append(
                        LabeledInstance(
                            tuple(sorted(marked)),
                            VERDICT_ATTACK,
                            f"{attack_tag}:{tag}",
                        )
                    )
        benign_tag = f"window<{spec.min_requests}"
        for key in sorted(pairs):
            ids = tuple(sorted(r.record_id for r in pairs[key]))
            result.instances.append(LabeledInstance(ids, VERDICT_BENIGN, benign_tag))
    else:
        review_tag = f"{spec.review_min}-{spec.min_requests - 1}-review"
        benign_tag = f"window<{spec.review_min}"
        for key in sorted(pairs):
            ids = tuple(sorted(r.record_id for r in pairs[key]))
            peak = pair_peaks[key]
            if spec.review_min <= peak < spec.min_requests:
                result.instances.append(
                    LabeledInstance(ids, VERDICT_REVIEW, review_tag)
                )
            else:
                result.instances.append(
                    LabeledInstance(ids, VERDICT_BENIGN, benign_tag)
                )
    return result


@dataclass(frozen=True)
class RuleThresholds:
    """Snort-style reference detector thresholds.

    The defaults are deliberately rate-shaped (a short ping window) the way
    signature engines configure flood preprocessors; slow-but-steady floods
    that the 20-second ground-truth rule catches can escape them.
    """

    syn_window_seconds: float = 60.0
    syn_s0_min: int = 100
    ping_window_seconds: float = 5.0
    ping_min_requests: int = 10

    @property
    def syn_window_us(self) -> int:
        return int(self.syn_window_seconds * 1_000_000)

    @property
    def ping_window_us(self) -> int:
        return int(self.ping_window_seconds * 1_000_000)


def rule_baseline(
    records: Iterable[TrafficRecord],
    thresholds: RuleThresholds = RuleThresholds(),
) -> LabelingResult:
    """Threshold-heuristic detector used for comparison runs.

    SYN: per-source S0 count over a sliding minute; windows at or above the
    threshold mark their member records attack. Ping: the same anchored
    window rule as the labelers with its own parameters. Scope matches the
    labelers (known-state TCP plus ICMP echo requests) so reports compare
    over identical label sets.
    """
    result = LabelingResult()
    tcp_scope: list[TrafficRecord] = []
    icmp_scope: list[TrafficRecord] = []
    for r in records:
        if r.proto == "tcp" and (
            r.conn_state == "S0" or r.conn_state in BENIGN_CONN_STATES
        ):
            tcp_scope.append(r)
        elif r.proto == "icmp" and r.icmp_type == 8:
            icmp_scope.append(r)
        else:
            result.excluded.append(r.record_id)

    syn_tag = f"s0-rate>={thresholds.syn_s0_min}"
    s0_by_src: dict[str, list[TrafficRecord]] = {}
    for r in tcp_scope:
        if r.conn_state == "S0":
            s0_by_src.setdefault(r.src_ip, []).append(r)
    attack_ids: set[str] = set()
    for src in sorted(s0_by_src):
        events = _sorted_events(s0_by_src[src])
        marked, _ = window_marks(events, thresholds.syn_window_us, thresholds.syn_s0_min)
        attack_ids |= marked
        if marked:
            result.instances.append(
                LabeledInstance(tuple(sorted(marked)), VERDICT_ATTACK, syn_tag)
            )
    benign_tcp = tuple(
        sorted(r.record_id for r in tcp_scope if r.record_id not in attack_ids)
    )
    if benign_tcp:
        result.instances.append(
            LabeledInstance(benign_tcp, VERDICT_BENIGN, f"s0-rate<{thresholds.syn_s0_min}")
        )

    ping_tag = f"window>={thresholds.ping_min_requests}/{thresholds.ping_window_seconds:g}s"
    pairs: dict[tuple[str, str], list[TrafficRecord]] = {}
    for r in icmp_scope:
        pairs.setdefault((r.src_ip, r.dst_ip), []).append(r)
    ping_attack: set[str] = set()
    for key in sorted(pairs):
        events = _sorted_events(pairs[key])
        marked, _ = window_marks(
            events, thresholds.ping_window_us, thresholds.ping_min_requests
        )
        ping_attack |= marked
        if marked:
            result.instances.append(
                LabeledInstance(tuple(sorted(marked)), VERDICT_ATTACK, ping_tag)
            )
    benign_icmp = tuple(
        sorted(r.record_id for r in icmp_scope if r.record_id not in ping_attack)
    )
    if benign_icmp:
        result.instances.append(
            LabeledInstance(
                benign_icmp,
                VERDICT_BENIGN,
                f"window<{thresholds.ping_min_requests}/{thresholds.ping_window_seconds:g}s",
            )
        )
    return result
