"""Seeded synthetic traffic corpus with planted floods.

Generates a desk-scale mix of benign TCP/UDP/ICMP background plus planted
SYN floods (S0 bursts) and ping floods (>= 10 echo requests inside a
20-second window, some fast enough for rate detectors and some slow enough
to slip past them). Everything derives from one RNG seed, so two runs are
byte-identical; the planted ground truth rides along for scoring.

Run `python -m flowsleuth.synth OUTDIR` to write a demo Zeek-style log.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .ingest import TrafficRecord

BASE_TS = 1_641_686_400_000_000  # 2022-01-09 00:00:00 UTC, epoch microseconds

BENIGN_TCP_STATES = ("SF", "SF", "SF", "SF", "RSTO", "RSTR", "SH", "OTH")


@dataclass
class SyntheticCorpus:
    records: list[TrafficRecord]
    truth: dict[str, str]  # record_id -> "attack" | "benign"
    syn_attack_ids: set[str] = field(default_factory=set)
    ping_attack_ids: set[str] = field(default_factory=set)

    @property
    def attack_ids(self) -> set[str]:
        return self.syn_attack_ids | self.ping_attack_ids


def _ts(rng: random.Random, lo_s: float, hi_s: float) -> int:
    return BASE_TS + int(rng.uniform(lo_s, hi_s) * 1_000_000)


def generate_corpus(
    seed: int = 20220109,
    background_tcp: int = 4200,
    background_udp: int = 300,
    benign_ping_groups: int = 60,
    review_band_groups: int = 10,
    syn_floods: int = 3,
    syn_flood_size: int = 120,
    fast_ping_floods: int = 3,
    fast_ping_size: int = 20,
    slow_ping_floods: int = 3,
    slow_ping_size: int = 12,
) -> SyntheticCorpus:
    """Build the corpus; defaults yield a bit over 5,000 records.

    Benign hosts live in 10.0.0.0/16, attackers in 198.51.100.0/24,
    flood victims in 203.0.113.0/24; the pools never mix, so a flooded
    pair carries no benign traffic. Background TCP avoids the S0 state
    (it is the SYN-flood signature by definition) and benign ping groups
    get their own pair and minute so aggregate windows cannot stack them
    into phantom floods.
    """
    rng = random.Random(seed)
    records: list[TrafficRecord] = []
    truth: dict[str, str] = {}
    syn_ids: set[str] = set()
    ping_ids: set[str] = set()
    counter = 0

    def next_id(prefix: str) -> str:
        nonlocal counter
        counter += 1
        return f"{prefix}{counter:06d}"

    def benign_host() -> str:
        return f"10.0.{rng.randint(0, 63)}.{rng.randint(1, 254)}"

    day = 86_400.0

    for _ in range(background_tcp):
        rid = next_id("bg")
        records.append(
            TrafficRecord(
                ts=_ts(rng, 0, day),
                src_ip=benign_host(),
                dst_ip=benign_host(),
                proto="tcp",
                record_id=rid,
                src_port=rng.randint(1024, 65535),
                dst_port=rng.choice((22, 53, 80, 123, 443, 8080)),
                conn_state=rng.choice(BENIGN_TCP_STATES),
                bytes_orig=rng.randint(40, 20000),
                bytes_resp=rng.randint(40, 200000),
                pkts_orig=rng.randint(1, 60),
                pkts_resp=rng.randint(1, 120),
            )
        )
        truth[rid] = "benign"

    for _ in range(background_udp):
        rid = next_id("bg")
        records.append(
            TrafficRecord(
                ts=_ts(rng, 0, day),
                src_ip=benign_host(),
                dst_ip=benign_host(),
                proto="udp",
                record_id=rid,
                src_port=rng.randint(1024, 65535),
                dst_port=rng.choice((53, 123, 443)),
                bytes_orig=rng.randint(40, 1500),
                bytes_resp=rng.randint(0, 1500),
                pkts_orig=rng.randint(1, 4),
                pkts_resp=rng.randint(0, 4),
            )
        )
        truth[rid] = "benign"

    # Benign diagnostic pings: 1-4 echo requests per pair, each group in
    # its own minute slot. Review-band groups put 5-9 requests inside one
    # 20-second window (benign in ground truth, review under expert rules).
    slot = 0
    for group in range(benign_ping_groups + review_band_groups):
        src, dst = benign_host(), benign_host()
        in_review_band = group >= benign_ping_groups
        count = rng.randint(5, 9) if in_review_band else rng.randint(1, 4)
        start = slot * 60.0
        slot += 1
        for i in range(count):
            rid = next_id("png")
            offset = i * (16.0 / max(count, 1)) if in_review_band else i * 9.0
            records.append(
                TrafficRecord(
                    ts=BASE_TS + int((start + offset) * 1_000_000),
                    src_ip=src,
                    dst_ip=dst,
                    proto="icmp",
                    record_id=rid,
                    icmp_type=8,
                    icmp_code=0,
                    pkts_orig=1,
                )
            )
            truth[rid] = "benign"

    for flood in range(syn_floods):
        attacker = f"198.51.100.{10 + flood}"
        victim = f"203.0.113.{10 + flood}"
        start = rng.uniform(0, day - 60)
        for i in range(syn_flood_size):
            rid = next_id("synf")
            records.append(
                TrafficRecord(
                    ts=BASE_TS + int((start + i * 0.33) * 1_000_000),
                    src_ip=attacker,
                    dst_ip=victim,
                    proto="tcp",
                    record_id=rid,
                    src_port=rng.randint(1024, 65535),
                    dst_port=80,
                    conn_state="S0",
                    bytes_orig=0,
                    bytes_resp=0,
                    pkts_orig=1,
                    pkts_resp=0,
                )
            )
            truth[rid] = "attack"
            syn_ids.add(rid)

    def plant_ping_flood(flood_no: int, size: int, spacing_s: float, kind: str) -> None:
        attacker = f"198.51.100.{100 + flood_no}"
        victim = f"203.0.113.{100 + flood_no}"
        start = rng.uniform(0, day - 120)
        for i in range(size):
            rid = next_id(kind)
            records.append(
                TrafficRecord(
                    ts=BASE_TS + int((start + i * spacing_s) * 1_000_000),
                    src_ip=attacker,
                    dst_ip=victim,
                    proto="icmp",
                    record_id=rid,
                    icmp_type=8,
                    icmp_code=0,
                    pkts_orig=1,
                )
            )
            truth[rid] = "attack"
            ping_ids.add(rid)

    # Fast floods trip rate-style detectors; slow floods stay under the
    # short-window rate while still exceeding 10 requests per 20 seconds.
    for n in range(fast_ping_floods):
        plant_ping_flood(n, fast_ping_size, 0.2, "pfast")
    for n in range(slow_ping_floods):
        plant_ping_flood(fast_ping_floods + n, slow_ping_size, 1.7, "pslow")

    records.sort(key=lambda r: (r.ts, r.record_id))
    return SyntheticCorpus(
        records=records, truth=truth, syn_attack_ids=syn_ids, ping_attack_ids=ping_ids
    )


ZEEK_HEADER_FIELDS = (
    "ts", "uid", "id.orig_h", "id.orig_p", "id.resp_h", "id.resp_p",
    "proto", "conn_state", "orig_bytes", "resp_bytes", "orig_pkts", "resp_pkts",
)


def records_to_zeek_tsv(records: Iterable[TrafficRecord]) -> str:
    """Render records as a Zeek-style TSV log (ICMP type/code in the port
    columns, `-` for unset), the inverse of the zeek-tsv ingest dialect."""

    def unset(v) -> str:
        return "-" if v is None else str(v)

    lines = [
        "#separator \\x09",
        "#unset_field\t-",
        "#fields\t" + "\t".join(ZEEK_HEADER_FIELDS),
    ]
    for r in records:
        ts = f"{r.ts // 1_000_000}.{r.ts % 1_000_000:06d}"
        if r.proto == "icmp":
            orig_p, resp_p = unset(r.icmp_type), unset(r.icmp_code)
        else:
            orig_p, resp_p = unset(r.src_port), unset(r.dst_port)
        lines.append(
            "\t".join(
                (
                    ts, r.record_id, r.src_ip, orig_p, r.dst_ip, resp_p,
                    r.proto, unset(r.conn_state), unset(r.bytes_orig),
                    unset(r.bytes_resp), unset(r.pkts_orig), unset(r.pkts_resp),
                )
            )
        )
    return "\n".join(lines) + "\n"


def write_demo_corpus(out_dir: str | Path, seed: int = 20220109) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(seed=seed)
    log_path = out_dir / "conn.log"
    log_path.write_text(records_to_zeek_tsv(corpus.records), encoding="utf-8")
    return log_path


if __name__ == "__main__":  # pragma: no cover - convenience entry point
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else "demo-data"
    path = write_demo_corpus(target)
    print(f"wrote {path}")
