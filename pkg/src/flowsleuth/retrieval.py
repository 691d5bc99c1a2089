"""Hierarchical retrieval: filter, threshold, MMR, rerank, abstention gate.

The stages run in a fixed order: (1) entity extraction builds a metadata
filter applied across all three collections and the filtered candidates are
ranked by cosine; (2) candidates under the similarity threshold are dropped;
(3) MMR greedily selects a diverse subset balancing relevance against
redundancy; (4) a cross-encoder rescores the survivors and drops weak pairs;
(5) a pre-generation quality gate abstains when too little evidence remains,
reporting which stage starved it.

Every tie-break is deterministic (score desc, then collection, then
entry_id) so identical inputs produce identical results byte for byte.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Protocol, Sequence

from .embed import Embedding, cosine, tokenize
from .errors import ScorerUnavailable
from .kb import KBEntry, MetadataFilter, SearchHit, VectorStore
from .kb import COLLECTIONS

GATE_PASSED = "passed"
GATE_ABSTAINED = "abstained"


@dataclass(frozen=True)
class RetrievalConfig:
    """Pipeline knobs. fetch_k defaults to 3k when left unset."""

    tau: float = 0.3
    k: int = 5
    fetch_k: int | None = None
    mmr_lambda: float = 0.5
    min_evidence: int = 2
    rerank_floor: float = 0.2

    def resolved_fetch_k(self) -> int:
        return self.fetch_k if self.fetch_k is not None else 3 * self.k

    def validate(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")
        if not 0.0 <= self.mmr_lambda <= 1.0:
            raise ValueError("mmr_lambda must be in [0, 1]")
        if not (1 <= self.min_evidence <= self.k <= self.resolved_fetch_k()):
            raise ValueError("need 1 <= min_evidence <= k <= fetch_k")


@dataclass(frozen=True)
class QueryEntities:
    """Metadata hints extracted from an analyst query (additive, not deletions)."""

    ips: tuple[str, ...] = ()
    ports: tuple[int, ...] = ()
    protos: tuple[str, ...] = ()
    time_range: tuple[int, int] | None = None
    residual_text: str = ""


_IPV4 = re.compile(r"\b((?:\d{1,3}\.){3}\d{1,3})(?::(\d{1,5}))?\b")
_PORT_WORD = re.compile(r"\bports?\s+(\d{1,5})\b", re.IGNORECASE)
_PROTO_WORDS = {
    "tcp": "tcp",
    "udp": "udp",
    "icmp": "icmp",
    "syn": "tcp",
    "ping": "icmp",
    "echo": "icmp",
}
_PROTO_RE = re.compile(r"\b(tcp|udp|icmp|syn|ping|echo)\b", re.IGNORECASE)
_ISO_TS = re.compile(
    r"\b(\d{4})-(\d{2})-(\d{2})(?:[T ](\d{2}):(\d{2}):(\d{2}))?\b"
)

_DAY_US = 86_400_000_000


def _valid_ip(text: str) -> bool:
    return all(0 <= int(octet) <= 255 for octet in text.split("."))


def extract_entities(query: str) -> QueryEntities:
    """Pull IPs, ports, protocols, and timestamps out of a query string.

    Ports are only taken from explicit "port N" phrases or an :N suffix on
    an IP literal, which keeps clock strings from being misread as ports.
    A bare date expands to the whole UTC day; an exact timestamp stays a
    point range.
    """
    ips: list[str] = []
    ports: list[int] = []
    for m in _IPV4.finditer(query):
        ip = m.group(1)
        if not _valid_ip(ip):
            continue
        if ip not in ips:
            ips.append(ip)
        if m.group(2) is not None:
            port = int(m.group(2))
            if port <= 65535 and port not in ports:
                ports.append(port)
    for m in _PORT_WORD.finditer(query):
        port = int(m.group(1))
        if port <= 65535 and port not in ports:
            ports.append(port)

    protos: list[str] = []
    for m in _PROTO_RE.finditer(query):
        mapped = _PROTO_WORDS[m.group(1).lower()]
        if mapped not in protos:
            protos.append(mapped)

    starts: list[int] = []
    ends: list[int] = []
    for m in _ISO_TS.finditer(query):
        y, mo, d = int(m.group(1)), int(m.group(2)), int(m.group(3))
        try:
            if m.group(4) is not None:
                dt = datetime(
                    y, mo, d, int(m.group(4)), int(m.group(5)), int(m.group(6)),
                    tzinfo=timezone.utc,
                )
                t = int(dt.timestamp()) * 1_000_000
                starts.append(t)
                ends.append(t)
            else:
                day = int(datetime(y, mo, d, tzinfo=timezone.utc).timestamp()) * 1_000_000
                starts.append(day)
                ends.append(day + _DAY_US - 1)
        except ValueError:
            continue  # not a real calendar date
    time_range = (min(starts), max(ends)) if starts else None

    return QueryEntities(
        ips=tuple(ips),
        ports=tuple(ports),
        protos=tuple(protos),
        time_range=time_range,
        residual_text=query,
    )


def merge_entities(*sets: QueryEntities) -> QueryEntities:
    """Union entity sets in order; the most recent time range wins.

    Used for session context carry: prior turns' entities merged with the
    current turn's, so a follow-up can inherit an earlier time filter.
    """
    ips: list[str] = []
    ports: list[int] = []
    protos: list[str] = []
    time_range = None
    residual = ""
    for e in sets:
        for ip in e.ips:
            if ip not in ips:
                ips.append(ip)
        for p in e.ports:
            if p not in ports:
                ports.append(p)
        for pr in e.protos:
            if pr not in protos:
                protos.append(pr)
        if e.time_range is not None:
            time_range = e.time_range
        residual = e.residual_text
    return QueryEntities(
        ips=tuple(ips),
        ports=tuple(ports),
        protos=tuple(protos),
        time_range=time_range,
        residual_text=residual,
    )


def build_filter(e: QueryEntities) -> MetadataFilter:
    """Map extracted entities onto the store's conjunctive filter.

    Each IP becomes the sanctioned (src=ip OR dst=ip) clause; protocols and
    ports become one-of equality clauses (ports on dst_port, the side a
    query like "port 80" is about); timestamps become the inclusive range.
    Empty entities produce the match-all filter.
    """
    equals: dict[str, object] = {}
    if e.protos:
        equals["proto"] = frozenset(e.protos)
    if e.ports:
        equals["dst_port"] = frozenset(e.ports)
    ts_min = ts_max = None
    if e.time_range is not None:
        ts_min, ts_max = e.time_range
    return MetadataFilter(equals=equals, ip_any=e.ips, ts_min=ts_min, ts_max=ts_max)


class CrossScorer(Protocol):
    def score(self, query: str, passage: str) -> float: ...


class JaccardScorer:
    """Offline cross-encoder stand-in: token-set Jaccard overlap in [0, 1]."""

    def score(self, query: str, passage: str) -> float:
        a = set(tokenize(query))
        b = set(tokenize(passage))
        if not a and not b:
            return 0.0
        union = len(a | b)
        return len(a & b) / union if union else 0.0


class RemoteCrossScorer:
    """Posts (query, passage) pairs to a scoring service.

    Request: {"model": ..., "pairs": [[query, passage]]}; response:
    {"scores": [float]}. Raw logits are min-max normalized to [0, 1] per
    batch; a constant batch maps to all 1.0 (no information to separate).
    """

    def __init__(self, endpoint: str, model: str | None = None, timeout: float = 30.0):
        import httpx

        self.endpoint = endpoint
        self.model = model
        self._client = httpx.Client(timeout=timeout)

    def score(self, query: str, passage: str) -> float:
        return self.score_batch(query, [passage])[0]

    def score_batch(self, query: str, passages: Sequence[str]) -> list[float]:
        import httpx

        try:
            resp = self._client.post(
                self.endpoint,
                json={"model": self.model, "pairs": [[query, p] for p in passages]},
            )
            resp.raise_for_status()
            logits = [float(s) for s in resp.json()["scores"]]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise ScorerUnavailable(str(exc)) from exc
        if not logits:
            return []
        lo, hi = min(logits), max(logits)
        if hi == lo:
            return [1.0 for _ in logits]
        return [(s - lo) / (hi - lo) for s in logits]


@dataclass(frozen=True)
class RetrievedItem:
    entry: KBEntry
    similarity: float
    rerank_score: float
    collection: str


@dataclass
class RetrievalResult:
    """Evidence that survived the quality gate, or the reasons nothing did."""

    items: list[RetrievedItem]
    gate: str
    diagnostics: list[str]
    stage_counts: dict[str, int]
    entities: QueryEntities | None = None
    query_filter: MetadataFilter | None = None

    def entry_ids(self) -> list[str]:
        return [it.entry.entry_id for it in self.items]

    def to_json_dict(self) -> dict:
        return {
            "gate": self.gate,
            "diagnostics": list(self.diagnostics),
            "stage_counts": dict(self.stage_counts),
            "items": [
                {
                    "entry_id": it.entry.entry_id,
                    "collection": it.collection,
                    "similarity": it.similarity,
                    "rerank_score": it.rerank_score,
                    "summary": it.entry.summary,
                    "meta": it.entry.meta.to_dict(),
                }
                for it in self.items
            ],
        }


def mmr_select(
    query_vec: Embedding,
    candidates: Sequence[SearchHit],
    k: int,
    lam: float,
) -> list[SearchHit]:
    """Greedy maximal-marginal-relevance selection.

    Score of a remaining candidate c: lam * sim(q, c) - (1 - lam) *
    max(cos(c, s) for selected s). Seeded with the highest-similarity
    candidate (the first, since candidates arrive ranked); ties keep the
    earliest candidate in the incoming order. With lam = 1 the diversity
    term vanishes and the output is plain top-k by cosine.
    """
    if not candidates or k <= 0:
        return []
    remaining = list(candidates)
    selected = [remaining.pop(0)]
    while remaining and len(selected) < k:
        best_i = 0
        best_score = None
        for i, cand in enumerate(remaining):
            redundancy = max(
                cosine(cand.entry.vector, s.entry.vector) for s in selected
            )
            score = lam * cand.similarity - (1.0 - lam) * redundancy
            if best_score is None or score > best_score:
                best_score = score
                best_i = i
        selected.append(remaining.pop(best_i))
    return selected


def retrieve(
    store: VectorStore,
    cfg: RetrievalConfig,
    query: str,
    query_vec: Embedding,
    scorer: CrossScorer,
    entities: QueryEntities | None = None,
) -> RetrievalResult:
    """Run the full pipeline and gate the result.

    entities may be passed pre-merged (session context carry); by default
    they are extracted from the query text.
    """
    cfg.validate()
    if entities is None:
        entities = extract_entities(query)
    flt = build_filter(entities)

    hits = store.search(COLLECTIONS, query_vec, flt, top_n=cfg.resolved_fetch_k())
    searched = len(hits)

    above_tau = [h for h in hits if h.similarity >= cfg.tau]
    passed_tau = len(above_tau)

    mmr_picked = mmr_select(query_vec, above_tau, cfg.k, cfg.mmr_lambda)
    mmr_selected = len(mmr_picked)

    counts = {
        "searched": searched,
        "passed_tau": passed_tau,
        "mmr_selected": mmr_selected,
        "passed_rerank": 0,
    }

    try:
        scored = [
            (h, float(scorer.score(query, h.entry.summary))) for h in mmr_picked
        ]
    except ScorerUnavailable as exc:
        return RetrievalResult(
            items=[],
            gate=GATE_ABSTAINED,
            diagnostics=[f"stage=rerank scorer unavailable: {exc}"],
            stage_counts=counts,
            entities=entities,
            query_filter=flt,
        )

    survivors = [(h, s) for h, s in scored if s >= cfg.rerank_floor]
    survivors.sort(
        key=lambda t: (-t[1], -t[0].similarity, t[0].collection, t[0].entry.entry_id)
    )
    counts["passed_rerank"] = len(survivors)

    if len(survivors) < cfg.min_evidence:
        return RetrievalResult(
            items=[],
            gate=GATE_ABSTAINED,
            diagnostics=[_failing_stage(cfg, counts)],
            stage_counts=counts,
            entities=entities,
            query_filter=flt,
        )

    items = [
        RetrievedItem(
            entry=h.entry,
            similarity=h.similarity,
            rerank_score=s,
            collection=h.collection,
        )
        for h, s in survivors
    ]
    return RetrievalResult(
        items=items,
        gate=GATE_PASSED,
        diagnostics=[],
        stage_counts=counts,
        entities=entities,
        query_filter=flt,
    )


def _failing_stage(cfg: RetrievalConfig, counts: dict[str, int]) -> str:
    """Name the first stage whose output starved the gate."""
    if counts["searched"] < cfg.min_evidence:
        return f"stage=search matched {counts['searched']} entries"
    if counts["passed_tau"] < cfg.min_evidence:
        return (
            f"stage=tau passed {counts['passed_tau']} of {counts['searched']} "
            f"candidates (tau={cfg.tau})"
        )
    return (
        f"stage=rerank passed {counts['passed_rerank']} of "
        f"{counts['mmr_selected']} candidates (floor={cfg.rerank_floor})"
    )
