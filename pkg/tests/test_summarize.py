from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from flowsleuth.errors import EmptyPassage
from flowsleuth.ingest import AnomalyAnnotation
from flowsleuth.summarize import (
    DOC_CHUNK_OVERLAP,
    DOC_CHUNK_SIZE,
    summarize_document,
    summarize_record,
)

from conftest import TS_BASE, make_record


class TestSummarizeRecord:
    def test_icmp_dos_worked_example(self, dos_annotation):
        # 2024-08-15 10:05:23 UTC, icmp type 8, taxonomy DoS
        r = make_record(label=AnomalyAnnotation(severity="anomalous", taxonomy="DoS"))
        s = summarize_record(r)
        assert s.text == (
            "At 10:05:23 on August 15, 2024, host 192.0.2.7 sent an ICMP "
            "request to 203.0.113.5, flagged as a potential DoS anomaly."
        )
        assert s.source_collection_hint == "anomaly"

    def test_unlabeled_udp_has_no_flag_clause(self):
        r = make_record(proto="udp", src_port=5353, dst_port=53, icmp_type=None)
        s = summarize_record(r)
        assert "flagged" not in s.text
        assert s.source_collection_hint == "telemetry"

    def test_tcp_s0_template(self):
        r = make_record(
            proto="tcp", conn_state="S0", src_port=51515, dst_port=80, icmp_type=None
        )
        s = summarize_record(r)
        assert "ending in state S0" in s.text
        assert "192.0.2.7:51515" in s.text
        assert "203.0.113.5:80" in s.text

    def test_benign_label_does_not_flag(self):
        r = make_record(label=AnomalyAnnotation(severity="benign"))
        s = summarize_record(r)
        assert "flagged" not in s.text
        assert s.source_collection_hint == "telemetry"

    def test_icmp_reply_and_other_types(self):
        assert "ICMP reply" in summarize_record(make_record(icmp_type=0)).text
        assert "ICMP type-3 message" in summarize_record(make_record(icmp_type=3)).text

    def test_counts_knob(self):
        r = make_record(
            proto="tcp", conn_state="SF", src_port=1, dst_port=2,
            bytes_orig=100, bytes_resp=200, icmp_type=None,
        )
        assert "(100 bytes out, 200 bytes back)" in summarize_record(r).text
        assert "bytes" not in summarize_record(r, include_counts=False).text

    def test_other_proto_template(self):
        s = summarize_record(make_record(proto="gre", icmp_type=None))
        assert "GRE traffic" in s.text

    def test_determinism(self, dos_annotation):
        r = make_record(label=dos_annotation)
        assert summarize_record(r).text == summarize_record(r).text

    def test_required_fields_present(self):
        r = make_record()
        s = summarize_record(r)
        assert r.src_ip in s.text and r.dst_ip in s.text and "ICMP" in s.text

    def test_subsecond_timestamps_stay_distinct(self):
        a = summarize_record(make_record(ts=TS_BASE))
        b = summarize_record(make_record(ts=TS_BASE + 1))
        assert a.text != b.text

    @given(
        st.sampled_from(["icmp", "tcp", "udp"]),
        st.integers(min_value=0, max_value=2**48),
        st.integers(min_value=0, max_value=255),
    )
    def test_injectivity_over_key_fields(self, proto, ts, octet):
        kwargs = {"icmp_type": 8} if proto == "icmp" else {"icmp_type": None}
        base = make_record(proto=proto, ts=ts, **kwargs)
        other_src = make_record(proto=proto, ts=ts, src_ip=f"198.51.100.{octet}", **kwargs)
        other_ts = make_record(proto=proto, ts=ts + 1_000_000, **kwargs)
        assert summarize_record(base).text != summarize_record(other_src).text
        assert summarize_record(base).text != summarize_record(other_ts).text


class TestSummarizeDocument:
    def test_short_passage_is_identity(self):
        text = "MAWILab heuristic 20 denotes ICMP ping flood patterns"
        out = summarize_document(text)
        assert len(out) == 1
        assert out[0].text == text
        assert out[0].source_collection_hint == "heuristic"

    def test_chunking_recomposes(self):
        passage = "x".join(str(i % 7) for i in range(10_000))
        chunks = summarize_document(passage)
        assert all(len(c.text) <= DOC_CHUNK_SIZE for c in chunks)
        rebuilt = chunks[0].text + "".join(c.text[DOC_CHUNK_OVERLAP:] for c in chunks[1:])
        assert rebuilt == passage

    def test_chunk_ids_distinct(self):
        chunks = summarize_document("a" * 3000, metadata={"record_id": "note-1"})
        ids = [c.record_id for c in chunks]
        assert len(set(ids)) == len(ids)
        assert all(i.startswith("note-1") for i in ids)

    def test_whitespace_passage_raises(self):
        with pytest.raises(EmptyPassage):
            summarize_document("   \n\t ")
