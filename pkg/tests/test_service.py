from __future__ import annotations

import time

import pytest
from fastapi.testclient import TestClient

from flowsleuth.config import AppConfig
from flowsleuth.embed import EmbedderSpec
from flowsleuth.kb import VectorStore
from flowsleuth.pipeline import attach_detection_labels, auto_detect, build_kb, ingest_documents
from flowsleuth.service import Engine, SessionStore, create_app
from flowsleuth.synth import generate_corpus

DIM = 64


@pytest.fixture(scope="module")
def flood_store(tmp_path_factory):
    """Small store with a planted ping flood, built once for the module."""
    path = tmp_path_factory.mktemp("svc") / "store"
    corpus = generate_corpus(
        seed=7,
        background_tcp=150,
        background_udp=20,
        benign_ping_groups=10,
        review_band_groups=2,
        syn_floods=1,
        syn_flood_size=40,
        fast_ping_floods=1,
        slow_ping_floods=1,
    )
    records = attach_detection_labels(corpus.records, auto_detect(corpus.records))
    store = VectorStore.create(path, dim=DIM)
    from flowsleuth.embed import build_embedder

    embedder = build_embedder(EmbedderSpec(dim=DIM))
    build_kb(store, records, embedder)
    ingest_documents(
        store,
        [("Heuristic code 20 marks ICMP ping flood patterns: ten or more echo "
          "requests from one source to one destination inside twenty seconds.",
          {"record_id": "note-h20", "proto": "icmp", "heuristic_code": "20"})],
        embedder,
    )
    store.close()
    return path, corpus


def make_client(store_path, tmp_path, ttl=86_400.0, auth_token=None):
    cfg = AppConfig(store_path=str(store_path), embedder=EmbedderSpec(dim=DIM))
    if auth_token is not None:
        from flowsleuth.config import ServiceConfig

        cfg.service = ServiceConfig(auth_token=auth_token)
    store = VectorStore.open(store_path, readonly=True)
    engine = Engine(cfg, store)
    sessions = SessionStore(tmp_path / "sessions", ttl_seconds=ttl)
    return TestClient(create_app(engine, sessions)), sessions


def flood_pair(corpus):
    rec = next(r for r in corpus.records if r.record_id in corpus.ping_attack_ids)
    return rec.src_ip, rec.dst_ip


class TestQueryEndpoint:
    def test_first_query_creates_session_and_verdict(self, flood_store, tmp_path):
        path, corpus = flood_store
        client, _ = make_client(path, tmp_path)
        src, dst = flood_pair(corpus)
        resp = client.post(
            "/api/query",
            json={"question": f"Did host {src} flood {dst} with ICMP echo requests?"},
        )
        assert resp.status_code == 200
        body = resp.json()
        assert body["session_id"]
        assert body["verdict"]["decision"] == "attack"
        assert body["verdict"]["citations"]
        assert body["diagnostics"]["gate"] == "passed"

    def test_empty_question_400(self, flood_store, tmp_path):
        path, _ = flood_store
        client, _ = make_client(path, tmp_path)
        assert client.post("/api/query", json={"question": "  "}).status_code == 400

    def test_follow_up_inherits_entities(self, flood_store, tmp_path):
        path, corpus = flood_store
        client, _ = make_client(path, tmp_path)
        src, dst = flood_pair(corpus)
        first = client.post(
            "/api/query",
            json={"question": f"Show anomalies involving {dst} on 2022-01-09"},
        ).json()
        sid = first["session_id"]
        second = client.post(
            "/api/query",
            json={
                "question": "Compare with TCP SYN activity in the same interval",
                "session_id": sid,
            },
        ).json()
        assert second["session_id"] == sid
        # transcript carries both turns in order
        transcript = client.get(f"/api/sessions/{sid}").json()
        assert [t["question"] for t in transcript["turns"]] == [
            f"Show anomalies involving {dst} on 2022-01-09",
            "Compare with TCP SYN activity in the same interval",
        ]

    def test_unknown_session_returns_warning(self, flood_store, tmp_path):
        path, corpus = flood_store
        client, _ = make_client(path, tmp_path)
        src, dst = flood_pair(corpus)
        resp = client.post(
            "/api/query",
            json={"question": f"traffic for {dst}", "session_id": "nope"},
        ).json()
        assert "warning" in resp
        assert resp["session_id"] != "nope"

    def test_abstention_is_200_undecidable(self, flood_store, tmp_path):
        path, _ = flood_store
        client, _ = make_client(path, tmp_path)
        resp = client.post(
            "/api/query", json={"question": "traffic for 172.31.99.99 over icmp"}
        )
        assert resp.status_code == 200
        assert resp.json()["verdict"]["decision"] == "undecidable"

    def test_expired_session_treated_as_fresh(self, flood_store, tmp_path):
        path, corpus = flood_store
        client, sessions = make_client(path, tmp_path, ttl=0.05)
        _, dst = flood_pair(corpus)
        first = client.post("/api/query", json={"question": f"traffic for {dst}"}).json()
        time.sleep(0.1)
        second = client.post(
            "/api/query",
            json={"question": f"traffic for {dst}", "session_id": first["session_id"]},
        ).json()
        assert second["session_id"] != first["session_id"]
        assert "warning" in second


class TestEvidenceEndpoint:
    def test_cited_ids_resolve(self, flood_store, tmp_path):
        path, corpus = flood_store
        client, _ = make_client(path, tmp_path)
        src, dst = flood_pair(corpus)
        verdict = client.post(
            "/api/query",
            json={"question": f"Did host {src} flood {dst} with ICMP echo requests?"},
        ).json()["verdict"]
        assert verdict["citations"]
        for cid in verdict["citations"]:
            detail = client.get(f"/api/evidence/{cid}")
            assert detail.status_code == 200
            assert detail.json()["entry_id"] == cid

    def test_unknown_id_404(self, flood_store, tmp_path):
        path, _ = flood_store
        client, _ = make_client(path, tmp_path)
        assert client.get("/api/evidence/nope:1").status_code == 404

    def test_heuristic_entry_tagged(self, flood_store, tmp_path):
        path, _ = flood_store
        client, _ = make_client(path, tmp_path)
        detail = client.get("/api/evidence/h:note-h20").json()
        assert detail["collection"] == "heuristic"


class TestCollectionsAndSessions:
    def test_collections_match_store_stats(self, flood_store, tmp_path):
        path, _ = flood_store
        client, _ = make_client(path, tmp_path)
        body = client.get("/api/collections").json()
        store = VectorStore.open(path, readonly=True)
        assert body["counts"] == store.stats().counts
        assert body["dim"] == DIM
        store.close()

    def test_unknown_session_404(self, flood_store, tmp_path):
        path, _ = flood_store
        client, _ = make_client(path, tmp_path)
        assert client.get("/api/sessions/missing").status_code == 404

    def test_sessions_survive_restart(self, flood_store, tmp_path):
        path, corpus = flood_store
        client, sessions = make_client(path, tmp_path / "a")
        _, dst = flood_pair(corpus)
        sid = client.post("/api/query", json={"question": f"traffic for {dst}"}).json()[
            "session_id"
        ]
        # new app instance over the same sessions directory
        store = VectorStore.open(path, readonly=True)
        cfg = AppConfig(store_path=str(path), embedder=EmbedderSpec(dim=DIM))
        client2 = TestClient(create_app(Engine(cfg, store), SessionStore(sessions.directory)))
        transcript = client2.get(f"/api/sessions/{sid}")
        assert transcript.status_code == 200
        assert len(transcript.json()["turns"]) == 1
        store.close()

    def test_session_isolation(self, flood_store, tmp_path):
        path, corpus = flood_store
        client, _ = make_client(path, tmp_path)
        _, dst = flood_pair(corpus)
        a = client.post("/api/query", json={"question": f"traffic for {dst}"}).json()
        b = client.post("/api/query", json={"question": "icmp traffic anywhere"}).json()
        assert a["session_id"] != b["session_id"]
        ta = client.get(f"/api/sessions/{a['session_id']}").json()
        tb = client.get(f"/api/sessions/{b['session_id']}").json()
        assert len(ta["turns"]) == 1 and len(tb["turns"]) == 1
        assert ta["turns"][0]["question"] != tb["turns"][0]["question"]


class TestAuth:
    def test_bearer_token_enforced(self, flood_store, tmp_path):
        path, _ = flood_store
        client, _ = make_client(path, tmp_path, auth_token="sekrit")
        assert client.get("/api/collections").status_code == 401
        ok = client.get("/api/collections", headers={"Authorization": "Bearer sekrit"})
        assert ok.status_code == 200
