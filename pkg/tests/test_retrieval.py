from __future__ import annotations

import random

import pytest

from flowsleuth.embed import HashEmbedder
from flowsleuth.errors import ScorerUnavailable
from flowsleuth.kb import COLLECTIONS, MetadataFilter, VectorStore
from flowsleuth.retrieval import (
    JaccardScorer,
    RetrievalConfig,
    build_filter,
    extract_entities,
    merge_entities,
    mmr_select,
    retrieve,
)

from conftest import make_record
from oracles import reference_retrieve
from test_kb import make_entry, random_store_entries

DIM = 64


class TestExtractEntities:
    def test_ip_extraction(self):
        e = extract_entities("Show anomalies involving 203.0.113.5")
        assert e.ips == ("203.0.113.5",)
        assert e.ports == ()

    def test_syn_maps_to_tcp(self):
        e = extract_entities("compare tcp syn activity")
        assert e.protos == ("tcp",)

    def test_ping_and_echo_map_to_icmp(self):
        assert extract_entities("ping flood").protos == ("icmp",)
        assert extract_entities("echo requests observed").protos == ("icmp",)

    def test_no_entities(self):
        e = extract_entities("hello world")
        assert e.ips == () and e.ports == () and e.protos == ()
        assert e.time_range is None
        assert e.residual_text == "hello world"

    def test_port_word_and_ip_port_suffix(self):
        e = extract_entities("traffic to 192.0.2.1:443 and port 80")
        assert e.ips == ("192.0.2.1",)
        assert set(e.ports) == {443, 80}

    def test_clock_time_is_not_a_port(self):
        e = extract_entities("events around 10:05:23 today")
        assert e.ports == ()

    def test_date_expands_to_whole_day(self):
        e = extract_entities("what happened on 2024-08-15?")
        lo, hi = e.time_range
        assert hi - lo == 86_400_000_000 - 1

    def test_exact_timestamp_is_point(self):
        e = extract_entities("at 2024-08-15 10:05:23 exactly")
        lo, hi = e.time_range
        assert lo == hi

    def test_invalid_ip_rejected(self):
        e = extract_entities("host 999.1.1.1 is fake")
        assert e.ips == ()

    def test_residual_text_unchanged(self):
        q = "Show anomalies involving 203.0.113.5 over icmp"
        assert extract_entities(q).residual_text == q


class TestMergeEntities:
    def test_union_with_recency_time(self):
        first = extract_entities("anomalies for 1.1.1.1 on 2024-01-01")
        second = extract_entities("compare with tcp syn on 2024-01-02")
        merged = merge_entities(first, second)
        assert merged.ips == ("1.1.1.1",)
        assert merged.protos == ("tcp",)
        assert merged.time_range == second.time_range

    def test_later_turn_without_time_inherits(self):
        first = extract_entities("icmp anomalies on 2024-01-01")
        second = extract_entities("compare with tcp syn activity in the same interval")
        merged = merge_entities(first, second)
        assert merged.time_range == first.time_range
        assert set(merged.protos) == {"icmp", "tcp"}


class TestBuildFilter:
    def test_ip_expands_to_either_side(self, embedder):
        flt = build_filter(extract_entities("traffic with 10.0.0.1"))
        out = make_record(src_ip="10.0.0.1", dst_ip="2.2.2.2", record_id="a")
        inn = make_record(src_ip="3.3.3.3", dst_ip="10.0.0.1", record_id="b")
        neither = make_record(src_ip="4.4.4.4", dst_ip="5.5.5.5", record_id="c")
        from flowsleuth.pipeline import record_metadata

        assert flt.matches(record_metadata(out), "telemetry")
        assert flt.matches(record_metadata(inn), "telemetry")
        assert not flt.matches(record_metadata(neither), "telemetry")

    def test_empty_entities_match_all(self):
        flt = build_filter(extract_entities("hello"))
        assert flt.is_match_all()

    def test_proto_and_time_conjunction(self):
        from flowsleuth.pipeline import record_metadata

        flt = build_filter(extract_entities("icmp traffic on 2022-01-09"))
        base = 1_641_686_400_000_000
        in_range_icmp = make_record(ts=base + 100, record_id="a")
        in_range_tcp = make_record(
            ts=base + 100, proto="tcp", icmp_type=None, record_id="b"
        )
        out_of_range = make_record(ts=base - 5, record_id="c")
        assert flt.matches(record_metadata(in_range_icmp), "telemetry")
        assert not flt.matches(record_metadata(in_range_tcp), "telemetry")
        assert not flt.matches(record_metadata(out_of_range), "telemetry")


class TestJaccardScorer:
    def test_identical(self):
        s = JaccardScorer()
        assert s.score("icmp flood", "icmp flood") == 1.0

    def test_disjoint(self):
        assert JaccardScorer().score("alpha beta", "gamma delta") == 0.0

    def test_hand_computed(self):
        # |{icmp,host}| / |{icmp,flood,host,sent,request}| = 2/5
        got = JaccardScorer().score("icmp flood host", "host sent icmp request")
        assert got == pytest.approx(0.4)


class TestMmr:
    def _hits(self, store, embedder, texts, query):
        store.upsert("telemetry", [make_entry(f"t:{i}", t, embedder) for i, t in enumerate(texts)])
        return store.search(COLLECTIONS, embedder.embed(query), top_n=len(texts))

    def test_lambda_one_is_topk(self, store, embedder):
        texts = [f"doc {i} icmp flood topic {i % 3}" for i in range(12)]
        hits = self._hits(store, embedder, texts, "icmp flood")
        picked = mmr_select(embedder.embed("icmp flood"), hits, k=5, lam=1.0)
        assert picked == hits[:5]

    def test_subset_and_seed_properties(self, store, embedder):
        texts = [f"passage {i} about flood {i % 4}" for i in range(10)]
        hits = self._hits(store, embedder, texts, "flood passage")
        picked = mmr_select(embedder.embed("flood passage"), hits, k=4, lam=0.5)
        assert len(picked) == 4
        assert picked[0] == hits[0]  # seeded with max cosine
        ids = {h.entry.entry_id for h in hits}
        assert all(p.entry.entry_id in ids for p in picked)

    def test_handles_fewer_candidates_than_k(self, store, embedder):
        hits = self._hits(store, embedder, ["only one"], "one")
        assert len(mmr_select(embedder.embed("one"), hits, k=5, lam=0.5)) == 1


class _BrokenScorer:
    def score(self, query, passage):
        raise ScorerUnavailable("scorer offline")


class TestRetrieve:
    def _populated(self, store, embedder, n=20):
        rng = random.Random(7)
        by_collection = random_store_entries(rng, embedder, n)
        for name, entries in by_collection.items():
            if entries:
                store.upsert(name, entries)
        return by_collection

    def test_empty_store_abstains(self, store, embedder):
        cfg = RetrievalConfig()
        res = retrieve(store, cfg, "anything", embedder.embed("anything"), JaccardScorer())
        assert res.gate == "abstained"
        assert res.diagnostics == ["stage=search matched 0 entries"]
        assert res.stage_counts["searched"] == 0

    def test_gate_soundness(self, store, embedder):
        self._populated(store, embedder, 60)
        cfg = RetrievalConfig(tau=0.1, k=5, rerank_floor=0.05)
        res = retrieve(store, cfg, "icmp flood host", embedder.embed("icmp flood host"),
                       JaccardScorer())
        if res.gate == "passed":
            assert len(res.items) >= cfg.min_evidence
            for item in res.items:
                assert item.similarity >= cfg.tau
                assert item.rerank_score >= cfg.rerank_floor

    def test_threshold_monotonicity(self, store, embedder):
        self._populated(store, embedder, 80)
        q = embedder.embed("icmp flood host")
        counts = []
        for tau in (0.0, 0.2, 0.4, 0.6, 0.8):
            cfg = RetrievalConfig(tau=tau, rerank_floor=0.0)
            res = retrieve(store, cfg, "icmp flood host", q, JaccardScorer())
            counts.append(res.stage_counts["passed_tau"])
        assert counts == sorted(counts, reverse=True)

    def test_scorer_unavailable_abstains_never_silent(self, store, embedder):
        self._populated(store, embedder, 40)
        cfg = RetrievalConfig(tau=0.0)
        res = retrieve(store, cfg, "icmp flood host", embedder.embed("icmp flood host"),
                       _BrokenScorer())
        assert res.gate == "abstained"
        assert any("scorer unavailable" in d for d in res.diagnostics)

    def test_determinism(self, store, embedder):
        self._populated(store, embedder, 50)
        cfg = RetrievalConfig(tau=0.0, rerank_floor=0.0)
        q = embedder.embed("flood host alpha")
        a = retrieve(store, cfg, "flood host alpha", q, JaccardScorer())
        b = retrieve(store, cfg, "flood host alpha", q, JaccardScorer())
        assert a.to_json_dict() == b.to_json_dict()

    def test_matches_reference_pipeline(self, tmp_path, embedder):
        rng = random.Random(99)
        scorer = JaccardScorer()
        queries = [
            "icmp flood from 10.0.0.1",
            "tcp scan against host",
            "alpha beta gamma",
            "flood flood flood",
        ]
        for trial in range(25):
            by_collection = random_store_entries(rng, embedder, rng.randint(1, 100))
            store = VectorStore.create(tmp_path / f"s{trial}", dim=DIM)
            for name, entries in by_collection.items():
                if entries:
                    store.upsert(name, entries)
            query = rng.choice(queries)
            qvec = embedder.embed(query)
            cfg = RetrievalConfig(
                tau=rng.choice([0.0, 0.1, 0.3]),
                k=rng.randint(2, 6),
                mmr_lambda=rng.choice([0.0, 0.5, 1.0]),
                min_evidence=2,
                rerank_floor=rng.choice([0.0, 0.1, 0.2]),
            )
            res = retrieve(store, cfg, query, qvec, scorer)
            expected = reference_retrieve(
                by_collection, query, qvec, build_filter(extract_entities(query)),
                cfg.tau, cfg.k, cfg.resolved_fetch_k(), cfg.mmr_lambda,
                cfg.rerank_floor, cfg.min_evidence,
            )
            assert res.gate == expected["gate"], f"trial {trial}"
            got = [
                {
                    "entry_id": it.entry.entry_id,
                    "collection": it.collection,
                    "similarity": it.similarity,
                    "rerank": it.rerank_score,
                }
                for it in res.items
            ]
            assert got == expected["items"], f"trial {trial}"
            assert res.stage_counts == expected["counts"], f"trial {trial}"
            store.close()

    def test_result_serializes_with_stage_counts(self, store, embedder):
        self._populated(store, embedder, 30)
        cfg = RetrievalConfig(tau=0.0, rerank_floor=0.0)
        res = retrieve(store, cfg, "flood", embedder.embed("flood"), JaccardScorer())
        d = res.to_json_dict()
        assert set(d["stage_counts"]) == {"searched", "passed_tau", "mmr_selected", "passed_rerank"}

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RetrievalConfig(tau=1.5).validate()
        with pytest.raises(ValueError):
            RetrievalConfig(min_evidence=6, k=5).validate()
        with pytest.raises(ValueError):
            RetrievalConfig(k=10, fetch_k=5).validate()
