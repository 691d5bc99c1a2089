from __future__ import annotations

import json
import random

import numpy as np
import pytest

from flowsleuth.embed import Embedding, HashEmbedder
from flowsleuth.errors import DimensionMismatch, StorageFailure, UnknownCollection
from flowsleuth.kb import (
    COLLECTIONS,
    KBEntry,
    Metadata,
    MetadataFilter,
    VectorStore,
)

from oracles import brute_force_search

DIM = 64


def make_entry(
    entry_id: str,
    text: str,
    embedder: HashEmbedder,
    **meta,
) -> KBEntry:
    meta.setdefault("record_id", entry_id)
    return KBEntry(
        entry_id=entry_id,
        summary=text,
        vector=embedder.embed(text),
        meta=Metadata(**meta),
    )


def random_store_entries(rng: random.Random, embedder: HashEmbedder, n: int):
    """Random entries spread over all collections with varied metadata."""
    protos = ["tcp", "udp", "icmp"]
    by_collection: dict[str, list[KBEntry]] = {c: [] for c in COLLECTIONS}
    for i in range(n):
        collection = rng.choice(list(COLLECTIONS))
        words = " ".join(rng.choice("alpha beta gamma icmp tcp flood host port scan".split())
                         for _ in range(rng.randint(2, 8)))
        entry = make_entry(
            f"{collection[0]}:{i:04d}",
            f"{words} {i}",
            embedder,
            src_ip=f"10.0.0.{rng.randint(0, 6)}" if collection != "heuristic" else None,
            dst_ip=f"10.0.1.{rng.randint(0, 6)}" if collection != "heuristic" else None,
            proto=rng.choice(protos + [None]),
            ts=rng.randint(0, 10_000) if collection != "heuristic" else None,
            severity=rng.choice(["anomalous", "suspicious", None, None]),
        )
        by_collection[collection].append(entry)
    return by_collection


class TestUpsertAndStats:
    def test_write_then_read(self, store, embedder):
        entries = [make_entry(f"t:{i}", f"text number {i}", embedder) for i in range(3)]
        assert store.upsert("telemetry", entries) == 3
        for e in entries:
            found = store.get(e.entry_id)
            assert found is not None
            assert found[0].summary == e.summary

    def test_upsert_same_id_replaces(self, store, embedder):
        store.upsert("telemetry", [make_entry("t:1", "first text", embedder)])
        store.upsert("telemetry", [make_entry("t:1", "second text", embedder)])
        entry, _ = store.get("t:1")
        assert entry.summary == "second text"
        assert store.stats().counts["telemetry"] == 1

    def test_collections_isolated(self, store, embedder):
        store.upsert("telemetry", [make_entry("x:1", "isolated entry", embedder)])
        q = embedder.embed("isolated entry")
        hits = store.search(["anomaly"], q, top_n=5)
        assert hits == []
        hits = store.search(["telemetry"], q, top_n=5)
        assert [h.entry.entry_id for h in hits] == ["x:1"]

    def test_stats_counts(self, store, embedder):
        assert store.stats().counts == {"telemetry": 0, "anomaly": 0, "heuristic": 0}
        store.upsert("telemetry", [make_entry(f"t:{i}", f"t {i}", embedder) for i in range(10)])
        store.upsert("anomaly", [make_entry(f"a:{i}", f"a {i}", embedder) for i in range(5)])
        store.upsert("heuristic", [make_entry("h:0", "h 0", embedder)])
        assert store.stats().counts == {"telemetry": 10, "anomaly": 5, "heuristic": 1}

    def test_unknown_collection(self, store, embedder):
        with pytest.raises(UnknownCollection):
            store.upsert("nonsense", [make_entry("n:1", "n", embedder)])
        with pytest.raises(UnknownCollection):
            store.search(["nonsense"], embedder.embed("q"))

    def test_dimension_mismatch(self, store):
        small = HashEmbedder(dim=8, seed=0)
        with pytest.raises(DimensionMismatch):
            store.upsert("telemetry", [make_entry("t:1", "x", small)])
        with pytest.raises(DimensionMismatch):
            store.search(COLLECTIONS, small.embed("x"))


class TestSearch:
    def test_filter_matching_nothing(self, store, embedder):
        store.upsert("telemetry", [make_entry("t:1", "something", embedder)])
        flt = MetadataFilter(equals={"proto": "icmp"})
        assert store.search(COLLECTIONS, embedder.embed("something"), flt) == []

    def test_top_n_of_brute_force_ranking(self, store, embedder):
        texts = ["icmp flood", "tcp scan", "icmp echo", "udp noise", "flood icmp echo"]
        entries = [make_entry(f"t:{i}", t, embedder) for i, t in enumerate(texts)]
        store.upsert("telemetry", entries)
        q = embedder.embed("icmp flood echo")
        hits = store.search(COLLECTIONS, q, top_n=3)
        expected = brute_force_search({"telemetry": entries}, q, MetadataFilter(), 3)
        assert [(h.collection, h.entry.entry_id, h.similarity) for h in hits] == expected

    def test_dst_ip_filter(self, store, embedder):
        a = make_entry("t:1", "to the target", embedder, dst_ip="203.0.113.5")
        b = make_entry("t:2", "to another host", embedder, dst_ip="203.0.113.9")
        store.upsert("telemetry", [a, b])
        flt = MetadataFilter(equals={"dst_ip": "203.0.113.5"})
        hits = store.search(COLLECTIONS, embedder.embed("to the host"), flt, top_n=10)
        assert [h.entry.entry_id for h in hits] == ["t:1"]

    def test_ip_any_matches_either_side(self, store, embedder):
        a = make_entry("t:1", "outbound", embedder, src_ip="9.9.9.9", dst_ip="1.1.1.1")
        b = make_entry("t:2", "inbound", embedder, src_ip="1.1.1.1", dst_ip="9.9.9.9")
        c = make_entry("t:3", "unrelated", embedder, src_ip="2.2.2.2", dst_ip="3.3.3.3")
        store.upsert("telemetry", [a, b, c])
        flt = MetadataFilter(ip_any=("9.9.9.9",))
        hits = store.search(COLLECTIONS, embedder.embed("traffic"), flt, top_n=10)
        assert sorted(h.entry.entry_id for h in hits) == ["t:1", "t:2"]

    def test_ts_range(self, store, embedder):
        early = make_entry("t:1", "early event", embedder, ts=100)
        late = make_entry("t:2", "late event", embedder, ts=900)
        store.upsert("telemetry", [early, late])
        flt = MetadataFilter(ts_min=0, ts_max=500)
        hits = store.search(COLLECTIONS, embedder.embed("event"), flt, top_n=10)
        assert [h.entry.entry_id for h in hits] == ["t:1"]

    def test_heuristic_entries_exempt_from_tuple_clauses(self, store, embedder):
        doc = make_entry("h:1", "ping flood reference note", embedder, proto="icmp")
        flow = make_entry("t:1", "a ping flow", embedder,
                          src_ip="9.9.9.9", dst_ip="8.8.8.8", proto="icmp", ts=50)
        store.upsert("heuristic", [doc])
        store.upsert("telemetry", [flow])
        flt = MetadataFilter(ip_any=("9.9.9.9",), equals={"proto": "icmp"}, ts_min=0, ts_max=100)
        hits = store.search(COLLECTIONS, embedder.embed("ping"), flt, top_n=10)
        assert sorted(h.entry.entry_id for h in hits) == ["h:1", "t:1"]
        # but a proto clause still excludes docs tagged with another proto
        flt_tcp = MetadataFilter(equals={"proto": "tcp"})
        hits = store.search(["heuristic"], embedder.embed("ping"), flt_tcp, top_n=10)
        assert hits == []

    def test_tie_break_order(self, store, embedder):
        # identical text -> identical vector -> identical sim; ties break by
        # collection asc then entry_id asc
        e1 = make_entry("z:9", "same exact text", embedder)
        e2 = make_entry("a:1", "same exact text", embedder)
        e3 = make_entry("m:5", "same exact text", embedder)
        store.upsert("telemetry", [e1, e2])
        store.upsert("anomaly", [e3])
        hits = store.search(COLLECTIONS, embedder.embed("same exact text"), top_n=3)
        assert [(h.collection, h.entry.entry_id) for h in hits] == [
            ("anomaly", "m:5"), ("telemetry", "a:1"), ("telemetry", "z:9"),
        ]

    def test_search_equivalence_randomized(self, tmp_path, embedder):
        # brute-force oracle over randomized stores, including tie order
        rng = random.Random(1234)
        for trial in range(20):
            by_collection = random_store_entries(rng, embedder, rng.randint(1, 120))
            store = VectorStore.create(tmp_path / f"s{trial}", dim=DIM)
            for name, entries in by_collection.items():
                if entries:
                    store.upsert(name, entries)
            q = embedder.embed(" ".join(rng.choice("alpha beta icmp flood host".split())
                                        for _ in range(3)))
            flt = rng.choice([
                MetadataFilter(),
                MetadataFilter(equals={"proto": "icmp"}),
                MetadataFilter(ip_any=("10.0.0.1",)),
                MetadataFilter(equals={"severity": "anomalous"}, ts_min=100, ts_max=9000),
                MetadataFilter(equals={"proto": frozenset({"tcp", "icmp"})}),
            ])
            top_n = rng.randint(1, 15)
            hits = store.search(COLLECTIONS, q, flt, top_n=top_n)
            expected = brute_force_search(by_collection, q, flt, top_n)
            got = [(h.collection, h.entry.entry_id, h.similarity) for h in hits]
            assert got == expected, f"trial {trial}"
            store.close()


class TestPersistence:
    def test_durability_close_reopen(self, tmp_path, embedder):
        path = tmp_path / "store"
        store = VectorStore.create(path, dim=DIM)
        entries = [
            make_entry(f"t:{i}", f"text {i} flood icmp", embedder, ts=i) for i in range(20)
        ]
        store.upsert("telemetry", entries[:15])
        store.upsert("anomaly", entries[15:])
        q = embedder.embed("flood icmp 3")
        before_stats = store.stats()
        before = [(h.collection, h.entry.entry_id, h.similarity)
                  for h in store.search(COLLECTIONS, q, top_n=10)]
        store.close()

        reopened = VectorStore.open(path)
        after = [(h.collection, h.entry.entry_id, h.similarity)
                 for h in reopened.search(COLLECTIONS, q, top_n=10)]
        assert reopened.stats() == before_stats
        assert after == before
        reopened.close()

    def test_replace_then_reopen_counts(self, tmp_path, embedder):
        path = tmp_path / "store"
        store = VectorStore.create(path, dim=DIM)
        store.upsert("telemetry", [make_entry("t:1", "one", embedder)])
        store.upsert("telemetry", [make_entry("t:1", "two", embedder)])
        store.close()
        reopened = VectorStore.open(path, readonly=True)
        assert reopened.stats().counts["telemetry"] == 1
        assert reopened.get("t:1")[0].summary == "two"
        reopened.close()

    def test_manifest_contents(self, tmp_path, embedder):
        path = tmp_path / "store"
        VectorStore.create(path, dim=DIM).close()
        manifest = json.loads((path / "manifest.json").read_text())
        assert manifest == {
            "format_version": 1,
            "dim": DIM,
            "collections": ["telemetry", "anomaly", "heuristic"],
        }

    def test_single_writer_lock(self, tmp_path):
        path = tmp_path / "store"
        store = VectorStore.create(path, dim=DIM)
        with pytest.raises(StorageFailure):
            VectorStore.open(path)
        # readers are fine while a writer holds the lock
        reader = VectorStore.open(path, readonly=True)
        reader.close()
        store.close()
        second = VectorStore.open(path)
        second.close()

    def test_readonly_cannot_upsert(self, tmp_path, embedder):
        path = tmp_path / "store"
        VectorStore.create(path, dim=DIM).close()
        reader = VectorStore.open(path, readonly=True)
        with pytest.raises(StorageFailure):
            reader.upsert("telemetry", [make_entry("t:1", "x", embedder)])
        reader.close()

    def test_compaction_is_canonical(self, tmp_path, embedder):
        # same content through different upsert histories -> identical bytes
        path_a, path_b = tmp_path / "a", tmp_path / "b"
        e1 = make_entry("t:1", "first", embedder)
        e2 = make_entry("t:2", "second", embedder)
        sa = VectorStore.create(path_a, dim=DIM)
        sa.upsert("telemetry", [e1, e2])
        sa.close()
        sb = VectorStore.create(path_b, dim=DIM)
        sb.upsert("telemetry", [e2])
        sb.upsert("telemetry", [e1])
        sb.close()
        for name in ("telemetry.entries.jsonl", "telemetry.vectors.bin"):
            assert (path_a / name).read_bytes() == (path_b / name).read_bytes()
