from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flowsleuth.embed import EmbedderSpec, HashEmbedder
from flowsleuth.ingest import AnomalyAnnotation, TrafficRecord
from flowsleuth.kb import VectorStore

TS_BASE = 1_723_716_323_000_000  # 2024-08-15 10:05:23 UTC


def make_record(
    record_id: str = "r1",
    ts: int = TS_BASE,
    src_ip: str = "192.0.2.7",
    dst_ip: str = "203.0.113.5",
    proto: str = "icmp",
    **kwargs,
) -> TrafficRecord:
    if proto == "icmp" and "icmp_type" not in kwargs:
        kwargs["icmp_type"] = 8
    return TrafficRecord(
        ts=ts, src_ip=src_ip, dst_ip=dst_ip, proto=proto, record_id=record_id, **kwargs
    )


@pytest.fixture
def embedder() -> HashEmbedder:
    return HashEmbedder(dim=64, seed=1)


@pytest.fixture
def store(tmp_path) -> VectorStore:
    s = VectorStore.create(tmp_path / "store", dim=64)
    yield s
    s.close()


@pytest.fixture
def dos_annotation() -> AnomalyAnnotation:
    return AnomalyAnnotation(severity="anomalous", taxonomy="DoS", heuristic_code=20)
