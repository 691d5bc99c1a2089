"""HTTP API with named analyst sessions.

Sessions carry context across query refinements: each turn's question
contributes extracted entities, and a follow-up inherits the union (with
the most recent time range winning). Transcripts persist to disk, so a
restarted service keeps them. Abstention is a normal 200 response with
decision=undecidable; only backend unavailability is an error status.
"""

from __future__ import annotations

import json
import time
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .config import AppConfig
from .embed import build_embedder
from .errors import RemoteUnavailable, UnverifiedCitation
from .generation import answer_with_evidence
from .kb import VectorStore
from .retrieval import QueryEntities, extract_entities, merge_entities


@dataclass
class Session:
    session_id: str
    created_at: float
    turns: list[dict] = field(default_factory=list)
    last_active: float = 0.0

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "created_at": self.created_at,
            "turns": self.turns,
        }


class SessionStore:
    """Disk-backed sessions; expiry applies to continuation, not history."""

    def __init__(self, directory: str | Path, ttl_seconds: float = 86_400.0):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.ttl_seconds = ttl_seconds
        self._mutex = threading.Lock()

    def _path(self, session_id: str) -> Path:
        safe = "".join(c for c in session_id if c.isalnum() or c in "-_")
        return self.directory / f"{safe}.json"

    def create(self) -> Session:
        now = time.time()
        session = Session(session_id=uuid.uuid4().hex, created_at=now, last_active=now)
        self._write(session)
        return session

    def load(self, session_id: str) -> Session | None:
        path = self._path(session_id)
        if not path.exists():
            return None
        d = json.loads(path.read_text(encoding="utf-8"))
        return Session(
            session_id=d["session_id"],
            created_at=d["created_at"],
            turns=d.get("turns", []),
            last_active=d.get("last_active", d["created_at"]),
        )

    def load_active(self, session_id: str) -> Session | None:
        """Load for continuation: expired sessions count as missing."""
        session = self.load(session_id)
        if session is None:
            return None
        if time.time() - session.last_active > self.ttl_seconds:
            return None
        return session

    def append_turn(self, session: Session, turn: dict) -> None:
        with self._mutex:
            session.turns.append(turn)
            session.last_active = time.time()
            self._write(session)

    def _write(self, session: Session) -> None:
        payload = dict(session.to_dict(), last_active=session.last_active)
        path = self._path(session.session_id)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        tmp.replace(path)


class Engine:
    """Bundles the store and backends behind one answer() call."""

    def __init__(self, config: AppConfig, store: VectorStore):
        self.config = config
        self.store = store
        self.embedder = build_embedder(config.embedder)
        self.scorer = config.scorer.build()
        self.llm = config.llm.build()

    def answer(self, question: str, entities: QueryEntities | None = None):
        return answer_with_evidence(
            question,
            self.store,
            self.config.retrieval,
            self.embedder,
            self.scorer,
            self.llm,
            entities=entities,
            max_context_tokens=self.config.llm.max_context_tokens,
        )


class QueryBody(BaseModel):
    question: str
    session_id: str | None = None


def merged_session_entities(session: Session, question: str) -> QueryEntities:
    """Entity-level context carry: prior questions first, current last."""
    sets = [extract_entities(t["question"]) for t in session.turns]
    sets.append(extract_entities(question))
    return merge_entities(*sets)


def create_app(engine: Engine, sessions: SessionStore) -> FastAPI:
    app = FastAPI(title="flowsleuth", version="0.1.0")
    auth_token = engine.config.service.auth_token

    async def check_auth(request: Request) -> None:
        if auth_token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {auth_token}":
            raise HTTPException(status_code=401, detail="missing or bad bearer token")

    @app.post("/api/query", dependencies=[Depends(check_auth)])
    def post_query(body: QueryBody) -> JSONResponse:
        question = body.question.strip()
        if not question:
            raise HTTPException(status_code=400, detail="question must not be empty")

        warning = None
        session = None
        if body.session_id:
            session = sessions.load_active(body.session_id)
            if session is None:
                warning = f"unknown or expired session {body.session_id!r}; started a new one"
        if session is None:
            session = sessions.create()

        entities = merged_session_entities(session, question)
        try:
            verdict, retrieval = engine.answer(question, entities=entities)
        except RemoteUnavailable as exc:
            raise HTTPException(status_code=503, detail=str(exc))
        except UnverifiedCitation as exc:
            # Grounding failure: the model cited evidence it was not given.
            return JSONResponse(
                status_code=502,
                content={"error": "grounding_failure", "detail": str(exc)},
            )

        sessions.append_turn(
            session,
            {
                "question": question,
                "verdict": verdict.to_json_dict(),
                "timestamp": time.time(),
            },
        )

        payload: dict[str, Any] = {
            "session_id": session.session_id,
            "verdict": verdict.to_json_dict(),
            "evidence": retrieval.to_json_dict()["items"],
            "diagnostics": {
                "gate": retrieval.gate,
                "messages": retrieval.diagnostics,
                "stage_counts": retrieval.stage_counts,
            },
        }
        if warning:
            payload["warning"] = warning
        return JSONResponse(payload)

    @app.get("/api/evidence/{entry_id}", dependencies=[Depends(check_auth)])
    def get_evidence(entry_id: str) -> dict:
        found = engine.store.get(entry_id)
        if found is None:
            raise HTTPException(status_code=404, detail=f"unknown entry id {entry_id!r}")
        entry, collection = found
        return {
            "entry_id": entry.entry_id,
            "collection": collection,
            "summary": entry.summary,
            "meta": entry.meta.to_dict(),
        }

    @app.get("/api/collections", dependencies=[Depends(check_auth)])
    def get_collections() -> dict:
        stats = engine.store.stats()
        return {"counts": stats.counts, "dim": stats.dim}

    @app.get("/api/sessions/{session_id}", dependencies=[Depends(check_auth)])
    def get_session(session_id: str) -> dict:
        session = sessions.load(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        return session.to_dict()

    static_dir = engine.config.service.static_dir
    if static_dir and Path(static_dir).is_dir():  # pragma: no cover - deploy path
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")

    return app


def build_service(config: AppConfig) -> tuple[FastAPI, Engine, SessionStore]:
    store = VectorStore.open(config.store_path, readonly=True)
    engine = Engine(config, store)
    sessions_dir = config.service.sessions_dir or str(Path(config.store_path) / "sessions")
    sessions = SessionStore(sessions_dir, ttl_seconds=config.service.session_ttl_seconds)
    return create_app(engine, sessions), engine, sessions
