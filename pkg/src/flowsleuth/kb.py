"""Persistent multi-collection vector store.

Three logically isolated collections (telemetry, anomaly, heuristic) hold
(summary, vector, metadata) entries. Search is an exact scan: metadata
filter, then cosine on pre-normalized vectors, sorted with deterministic
tie-breaks. Desk-scale corpora make exactness cheap and keep the
brute-force oracle trivially checkable.

On disk a store is one directory: a manifest, and per collection an
append-log of entry JSON plus a flat binary vector file (little-endian
float32, row-major) compacted on close. One writer at a time, enforced by
a lock file; readers open with readonly=True.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embed import Embedding
from .errors import DimensionMismatch, StorageFailure, UnknownCollection

FORMAT_VERSION = 1

COLLECTIONS = ("telemetry", "anomaly", "heuristic")

# Flow-tuple clauses that heuristic-collection entries are exempt from:
# reference prose has no 5-tuple, so it matches on proto/keyword metadata only.
_TUPLE_FIELDS = frozenset({"src_ip", "dst_ip", "src_port", "dst_port"})


@dataclass(frozen=True)
class Metadata:
    """Structured metadata carried alongside each summary."""

    record_id: str
    src_ip: str | None = None
    dst_ip: str | None = None
    src_port: int | None = None
    dst_port: int | None = None
    proto: str | None = None
    ts: int | None = None
    label: str | None = None
    heuristic_code: int | None = None
    severity: str | None = None

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "src_ip": self.src_ip,
            "dst_ip": self.dst_ip,
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "proto": self.proto,
            "ts": self.ts,
            "label": self.label,
            "heuristic_code": self.heuristic_code,
            "severity": self.severity,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Metadata":
        return cls(
            record_id=d["record_id"],
            src_ip=d.get("src_ip"),
            dst_ip=d.get("dst_ip"),
            src_port=d.get("src_port"),
            dst_port=d.get("dst_port"),
            proto=d.get("proto"),
            ts=d.get("ts"),
            label=d.get("label"),
            heuristic_code=d.get("heuristic_code"),
            severity=d.get("severity"),
        )


@dataclass(frozen=True)
class KBEntry:
    entry_id: str
    summary: str
    vector: Embedding
    meta: Metadata


@dataclass(frozen=True)
class MetadataFilter:
    """Conjunction of field tests, plus the one sanctioned disjunction.

    equals maps a Metadata field to a required value, or to a frozenset of
    allowed values (one-of). Every ip in ip_any must match either src_ip or
    dst_ip. ts_min/ts_max bound the entry timestamp inclusively.

    Heuristic-collection entries skip the 5-tuple and timestamp clauses and
    evaluate the remaining clauses leniently: an absent field passes, a
    present one must match.
    """

    equals: Mapping[str, object] = field(default_factory=dict)
    ip_any: tuple[str, ...] = ()
    ts_min: int | None = None
    ts_max: int | None = None

    def is_match_all(self) -> bool:
        return not self.equals and not self.ip_any and self.ts_min is None and self.ts_max is None

    def matches(self, meta: Metadata, collection: str) -> bool:
        lenient = collection == "heuristic"
        if not lenient:
            for ip in self.ip_any:
                if meta.src_ip != ip and meta.dst_ip != ip:
                    return False
            if self.ts_min is not None and (meta.ts is None or meta.ts < self.ts_min):
                return False
            if self.ts_max is not None and (meta.ts is None or meta.ts > self.ts_max):
                return False
        for name, want in self.equals.items():
            if lenient and name in _TUPLE_FIELDS:
                continue
            have = getattr(meta, name)
            if have is None:
                if lenient:
                    continue
                return False
            if isinstance(want, (set, frozenset)):
                if have not in want:
                    return False
            elif have != want:
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "equals": {k: (sorted(v) if isinstance(v, (set, frozenset)) else v)
                       for k, v in self.equals.items()},
            "ip_any": list(self.ip_any),
            "ts_min": self.ts_min,
            "ts_max": self.ts_max,
        }


MATCH_ALL = MetadataFilter()


@dataclass(frozen=True)
class SearchHit:
    entry: KBEntry
    similarity: float
    collection: str


@dataclass(frozen=True)
class StoreStats:
    counts: dict[str, int]
    dim: int


def _entry_to_dict(e: KBEntry) -> dict:
    return {"entry_id": e.entry_id, "summary": e.summary, "meta": e.meta.to_dict()}


class _Collection:
    """In-memory state for one collection: entries plus columnar filter arrays."""

    def __init__(self, dim: int):
        self.dim = dim
        self.entries: dict[str, KBEntry] = {}
        self._dirty = True
        self._ids: list[str] = []
        self._matrix: np.ndarray | None = None
        self._cols: dict[str, np.ndarray] = {}

    def put(self, entry: KBEntry) -> None:
        self.entries[entry.entry_id] = entry
        self._dirty = True

    def _rebuild(self) -> None:
        # Canonical candidate order: entry_id ascending. Search re-sorts by
        # similarity anyway; a fixed base order makes tie-breaking exact.
        self._ids = sorted(self.entries)
        rows = [self.entries[i].vector.values for i in self._ids]
        self._matrix = (
            np.stack(rows) if rows else np.zeros((0, self.dim), dtype=np.float32)
        )
        metas = [self.entries[i].meta for i in self._ids]
        self._cols = {
            "src_ip": np.array([m.src_ip or "" for m in metas], dtype=object),
            "dst_ip": np.array([m.dst_ip or "" for m in metas], dtype=object),
            "proto": np.array([m.proto or "" for m in metas], dtype=object),
            "ts": np.array(
                [m.ts if m.ts is not None else -1 for m in metas], dtype=np.int64
            ),
        }
        self._dirty = False

    def candidates(self, flt: MetadataFilter, collection: str) -> list[int]:
        """Indices (into the canonical order) of entries passing the filter."""
        if self._dirty:
            self._rebuild()
        n = len(self._ids)
        if n == 0:
            return []
        if flt.is_match_all():
            return list(range(n))
        lenient = collection == "heuristic"
        mask = np.ones(n, dtype=bool)
        if not lenient:
            for ip in flt.ip_any:
                mask &= (self._cols["src_ip"] == ip) | (self._cols["dst_ip"] == ip)
            if flt.ts_min is not None:
                mask &= self._cols["ts"] >= flt.ts_min
            if flt.ts_max is not None:
                mask &= (self._cols["ts"] <= flt.ts_max) & (self._cols["ts"] >= 0)
        idx = np.flatnonzero(mask)
        if flt.equals:
            # Columnar masks cover the hot fields; anything else falls back
            # to the full predicate below.
            out = []
            for i in idx:
                if flt.matches(self.entries[self._ids[i]].meta, collection):
                    out.append(int(i))
            return out
        return [int(i) for i in idx]

    def id_at(self, i: int) -> str:
        return self._ids[i]

    def vector_at(self, i: int) -> np.ndarray:
        assert self._matrix is not None
        return self._matrix[i]


class VectorStore:
    """A directory-backed store of the three collections.

    Use create()/open() rather than the constructor. Writers hold the lock
    file for the lifetime of the handle; close() compacts the on-disk logs
    into canonical (entry_id-sorted) form and releases the lock.
    """

    def __init__(self, path: Path, dim: int, readonly: bool = False):
        self.path = Path(path)
        self.dim = dim
        self.readonly = readonly
        self._collections: dict[str, _Collection] = {
            name: _Collection(dim) for name in COLLECTIONS
        }
        self._mutex = threading.RLock()
        self._locked = False
        self._closed = False

    # -- lifecycle ----------------------------------------------------------

    @classmethod
    def create(cls, path: str | Path, dim: int) -> "VectorStore":
        path = Path(path)
        try:
            path.mkdir(parents=True, exist_ok=True)
            if (path / "manifest.json").exists():
                raise StorageFailure(f"store already exists at {path}")
            store = cls(path, dim)
            store._acquire_lock()
            store._write_manifest()
        except OSError as exc:
            raise StorageFailure(f"cannot create store at {path}: {exc}") from exc
        return store

    @classmethod
    def open(cls, path: str | Path, readonly: bool = False) -> "VectorStore":
        path = Path(path)
        manifest_path = path / "manifest.json"
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageFailure(f"cannot open store at {path}: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise StorageFailure(
                f"unsupported store format {manifest.get('format_version')!r}"
            )
        store = cls(path, int(manifest["dim"]), readonly=readonly)
        if not readonly:
            store._acquire_lock()
        store._load()
        return store

    def _acquire_lock(self) -> None:
        lock = self.path / ".lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
        except FileExistsError:
            raise StorageFailure(
                f"store at {self.path} is locked by another writer"
            ) from None
        except OSError as exc:
            raise StorageFailure(f"cannot lock store: {exc}") from exc
        self._locked = True

    def _release_lock(self) -> None:
        if self._locked:
            try:
                (self.path / ".lock").unlink()
            except OSError:
                pass
            self._locked = False

    def _write_manifest(self) -> None:
        manifest = {
            "format_version": FORMAT_VERSION,
            "dim": self.dim,
            "collections": list(COLLECTIONS),
        }
        (self.path / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def _files(self, name: str) -> tuple[Path, Path]:
        return self.path / f"{name}.entries.jsonl", self.path / f"{name}.vectors.bin"

    def _load(self) -> None:
        for name in COLLECTIONS:
            entries_path, vectors_path = self._files(name)
            if not entries_path.exists():
                continue
            try:
                lines = entries_path.read_text(encoding="utf-8").splitlines()
                raw = vectors_path.read_bytes() if vectors_path.exists() else b""
            except OSError as exc:
                raise StorageFailure(f"cannot read collection {name}: {exc}") from exc
            vecs = np.frombuffer(raw, dtype="<f4")
            if vecs.shape[0] % max(self.dim, 1) and len(lines):
                raise StorageFailure(f"collection {name} vector file is truncated")
            if len(lines) * self.dim != vecs.shape[0]:
                raise StorageFailure(
                    f"collection {name} is corrupt: {len(lines)} entries vs "
                    f"{vecs.shape[0]} floats"
                )
            col = self._collections[name]
            for i, line in enumerate(lines):
                d = json.loads(line)
                vec = Embedding(vecs[i * self.dim : (i + 1) * self.dim])
                col.put(
                    KBEntry(
                        entry_id=d["entry_id"],
                        summary=d["summary"],
                        vector=vec,
                        meta=Metadata.from_dict(d["meta"]),
                    )
                )

    def close(self) -> None:
        """Compact logs to canonical sorted form and release the writer lock."""
        if self._closed:
            return
        with self._mutex:
            if not self.readonly:
                self._compact()
            self._release_lock()
            self._closed = True

    def _compact(self) -> None:
        for name in COLLECTIONS:
            col = self._collections[name]
            entries_path, vectors_path = self._files(name)
            if not col.entries:
                entries_path.unlink(missing_ok=True)
                vectors_path.unlink(missing_ok=True)
                continue
            ids = sorted(col.entries)
            tmp_e = entries_path.with_suffix(".tmp")
            tmp_v = vectors_path.with_suffix(".tmp")
            try:
                with open(tmp_e, "w", encoding="utf-8") as fe, open(tmp_v, "wb") as fv:
                    for entry_id in ids:
                        e = col.entries[entry_id]
                        fe.write(json.dumps(_entry_to_dict(e), separators=(",", ":")) + "\n")
                        fv.write(e.vector.values.astype("<f4").tobytes())
                    fe.flush()
                    os.fsync(fe.fileno())
                    fv.flush()
                    os.fsync(fv.fileno())
                os.replace(tmp_e, entries_path)
                os.replace(tmp_v, vectors_path)
            except OSError as exc:
                raise StorageFailure(f"compaction failed for {name}: {exc}") from exc

    def __enter__(self) -> "VectorStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- operations ---------------------------------------------------------

    def _collection(self, name: str) -> _Collection:
        if name not in self._collections:
            raise UnknownCollection(name)
        return self._collections[name]

    def upsert(self, collection: str, entries: Sequence[KBEntry]) -> int:
        """Insert or replace entries; durable before return.

        Vectors are stored as float32 (the persisted dtype), so searches
        against a live store and a reopened one see identical bytes.
        """
        if self.readonly:
            raise StorageFailure("store opened readonly")
        col = self._collection(collection)
        normalized = []
        for e in entries:
            if e.vector.dim != self.dim:
                raise DimensionMismatch(self.dim, e.vector.dim)
            if e.vector.values.dtype != np.float32:
                e = KBEntry(
                    entry_id=e.entry_id,
                    summary=e.summary,
                    vector=Embedding(e.vector.values.astype(np.float32)),
                    meta=e.meta,
                )
            normalized.append(e)
        entries = normalized
        with self._mutex:
            entries_path, vectors_path = self._files(collection)
            try:
                with open(entries_path, "a", encoding="utf-8") as fe, open(
                    vectors_path, "ab"
                ) as fv:
                    for e in entries:
                        fe.write(json.dumps(_entry_to_dict(e), separators=(",", ":")) + "\n")
                        fv.write(e.vector.values.astype("<f4").tobytes())
                    fe.flush()
                    os.fsync(fe.fileno())
                    fv.flush()
                    os.fsync(fv.fileno())
            except OSError as exc:
                raise StorageFailure(f"upsert failed: {exc}") from exc
            for e in entries:
                col.put(e)
        return len(entries)

    def search(
        self,
        collections: Iterable[str],
        query_vec: Embedding,
        flt: MetadataFilter | None = None,
        top_n: int = 10,
    ) -> list[SearchHit]:
        """Exact filtered scan, ranked by cosine (dot on unit vectors).

        Ties break by (collection name asc, entry_id asc); at most top_n
        hits are returned.
        """
        if top_n < 1:
            raise ValueError("top_n must be >= 1")
        if query_vec.dim != self.dim:
            raise DimensionMismatch(self.dim, query_vec.dim)
        flt = flt or MATCH_ALL
        names = sorted(set(collections))
        for name in names:
            if name not in self._collections:
                raise UnknownCollection(name)
        q = query_vec.values
        scored: list[tuple[float, str, str, KBEntry]] = []
        with self._mutex:
            for name in names:
                col = self._collections[name]
                for i in col.candidates(flt, name):
                    sim = float(np.dot(col.vector_at(i), q))
                    sim = max(-1.0, min(1.0, sim))
                    entry_id = col.id_at(i)
                    scored.append((sim, name, entry_id, col.entries[entry_id]))
        scored.sort(key=lambda t: (-t[0], t[1], t[2]))
        return [
            SearchHit(entry=e, similarity=sim, collection=name)
            for sim, name, _, e in scored[:top_n]
        ]

    def get(self, entry_id: str) -> tuple[KBEntry, str] | None:
        """Look up an entry by id across collections (collection name asc)."""
        with self._mutex:
            for name in COLLECTIONS:
                e = self._collections[name].entries.get(entry_id)
                if e is not None:
                    return e, name
        return None

    def stats(self) -> StoreStats:
        with self._mutex:
            return StoreStats(
                counts={name: len(self._collections[name].entries) for name in COLLECTIONS},
                dim=self.dim,
            )
