"""Configuration shared by the CLI and the HTTP service.

Config files are JSON or TOML; flags override file values. Secrets never
live in the file -- remote backends read their API keys from the
environment variable named in their spec.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .embed import EmbedderSpec
from .retrieval import JaccardScorer, RemoteCrossScorer, RetrievalConfig
from .generation import RemoteLLMClient, StubLLMClient

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib


@dataclass(frozen=True)
class ScorerSpec:
    kind: str = "jaccard"  # "jaccard" | "remote"
    endpoint: str | None = None
    model: str | None = None

    def build(self):
        if self.kind == "jaccard":
            return JaccardScorer()
        if self.kind == "remote":
            if not self.endpoint:
                raise ValueError("remote scorer requires an endpoint")
            return RemoteCrossScorer(self.endpoint, self.model)
        raise ValueError(f"unknown scorer kind: {self.kind!r}")


@dataclass(frozen=True)
class LLMSpec:
    kind: str = "stub"  # "stub" | "remote"
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "FLOWSLEUTH_LLM_API_KEY"
    max_context_tokens: int = 8000

    def build(self):
        if self.kind == "stub":
            return StubLLMClient()
        if self.kind == "remote":
            if not self.endpoint or not self.model:
                raise ValueError("remote llm requires endpoint and model")
            return RemoteLLMClient(self.endpoint, self.model, api_key_env=self.api_key_env)
        raise ValueError(f"unknown llm kind: {self.kind!r}")


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    auth_token: str | None = None
    session_ttl_seconds: float = 86_400.0
    sessions_dir: str | None = None  # defaults to <store>/sessions
    static_dir: str | None = None  # optional built console to serve at /


@dataclass(frozen=True)
class IngestConfig:
    csv_columns: Mapping[str, str] | None = None
    anomaly_columns: Mapping[str, str] | None = None
    include_counts_in_summary: bool = True


@dataclass
class AppConfig:
    store_path: str = "kb-store"
    embedder: EmbedderSpec = field(default_factory=EmbedderSpec)
    scorer: ScorerSpec = field(default_factory=ScorerSpec)
    llm: LLMSpec = field(default_factory=LLMSpec)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)


def _build(cls, data: Mapping[str, Any]):
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | Path | None) -> AppConfig:
    """Load JSON (default) or TOML config; None gives all defaults."""
    if path is None:
        return AppConfig()
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        data = json.loads(path.read_text(encoding="utf-8"))
    return config_from_dict(data)


def config_from_dict(data: Mapping[str, Any]) -> AppConfig:
    cfg = AppConfig()
    if "store_path" in data:
        cfg.store_path = str(data["store_path"])
    if "embedder" in data:
        cfg.embedder = _build(EmbedderSpec, data["embedder"])
    if "scorer" in data:
        cfg.scorer = _build(ScorerSpec, data["scorer"])
    if "llm" in data:
        cfg.llm = _build(LLMSpec, data["llm"])
    if "retrieval" in data:
        cfg.retrieval = _build(RetrievalConfig, data["retrieval"])
    if "service" in data:
        cfg.service = _build(ServiceConfig, data["service"])
    if "ingest" in data:
        cfg.ingest = _build(IngestConfig, data["ingest"])
    extra = set(data) - {
        "store_path", "embedder", "scorer", "llm", "retrieval", "service", "ingest"
    }
    if extra:
        raise ValueError(f"unknown config sections: {sorted(extra)}")
    return cfg
