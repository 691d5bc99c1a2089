"""Text embedding behind a pluggable backend.

Two backends share one contract: unit-norm float32 vectors of a fixed
dimension. The hash stub is fully deterministic (keyed blake2b feature
hashing with signs) so the whole pipeline runs offline and reproducibly;
the remote client speaks a small JSON protocol to an embedding service.
Remote failures never silently degrade to the stub.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Protocol

import numpy as np

from .errors import DimensionMismatch, EmptyText, RemoteUnavailable

DEFAULT_DIM = 384

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


class Embedding:
    """A d-dimensional float vector; embedders always return unit norm.

    Embedder backends produce float32 (the store's persisted dtype);
    float64 input is preserved for callers doing exact analytic work.
    """

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 1:
            raise ValueError("embedding must be one-dimensional")
        if arr.flags.writeable:
            arr = arr.copy()
            arr.setflags(write=False)
        self.values = arr

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def tolist(self) -> list[float]:
        return [float(v) for v in self.values]

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Embedding(dim={self.dim}, norm={self.norm():.6f})"


@dataclass(frozen=True)
class EmbedderSpec:
    """Which embedding backend to build and its parameters."""

    kind: str = "hash_stub"  # "hash_stub" | "remote"
    dim: int = DEFAULT_DIM
    seed: int = 0
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "FLOWSLEUTH_EMBED_API_KEY"
    max_in_flight: int = 4

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.kind not in ("hash_stub", "remote"):
            raise ValueError(f"unknown embedder kind: {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote embedder requires an endpoint")


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> Embedding: ...

    def embed_batch(self, texts: Iterable[str]) -> list[Embedding]: ...


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(vec))
    if n == 0.0:
        out = np.zeros(vec.shape[0], dtype=np.float32)
        out[0] = 1.0
        return out
    return (vec / n).astype(np.float32)


class HashEmbedder:
    """Signed feature hashing: deterministic, dependency-free, and lexical.

    Each token is hashed (keyed blake2b, so cross-process stable) into one
    of `dim` buckets with a hash-derived sign; the accumulated vector is
    L2-normalized. Shared tokens between two texts yield positive cosine,
    which the retrieval tests rely on. The output for a fixed (seed, text)
    is part of the golden corpus and must never change.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "big", signed=True)

    def _token_hash(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key)
        return int.from_bytes(digest.digest(), "big")

    def embed(self, text: str) -> Embedding:
        if not text.strip():
            raise EmptyText("cannot embed empty text")
        acc = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(text):
            h = self._token_hash(token)
            bucket = h % self.dim
            sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
            acc[bucket] += sign
        return Embedding(l2_normalize(acc))

    def embed_batch(self, texts: Iterable[str]) -> list[Embedding]:
        return [self.embed(t) for t in texts]


class RemoteEmbedder:
    """Client for a JSON embedding service.

    Request: {"model": ..., "inputs": [str]}; response: {"vectors": [[float]]}.
    Vectors are L2-normalized before use; a wrong dimension raises rather
    than being padded or truncated.
    """

    def __init__(self, spec: EmbedderSpec, batch_size: int = 64, timeout: float = 30.0):
        import httpx

        self.dim = spec.dim
        self._spec = spec
        self._batch_size = batch_size
        headers = {}
        api_key = os.environ.get(spec.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers)
        self._gate = threading.Semaphore(spec.max_in_flight)

    def _post(self, inputs: list[str]) -> list[Embedding]:
        import httpx

        payload = {"model": self._spec.model, "inputs": inputs}
        try:
            with self._gate:
                resp = self._client.post(self._spec.endpoint, json=payload)
            resp.raise_for_status()
            vectors = resp.json()["vectors"]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise RemoteUnavailable(str(exc)) from exc
        out = []
        for vec in vectors:
            if len(vec) != self.dim:
                raise DimensionMismatch(self.dim, len(vec))
            out.append(Embedding(l2_normalize(np.asarray(vec, dtype=np.float64))))
        return out

    def embed(self, text: str) -> Embedding:
        if not text.strip():
            raise EmptyText("cannot embed empty text")
        return self._post([text])[0]

    def embed_batch(self, texts: Iterable[str]) -> list[Embedding]:
        texts = list(texts)
        for t in texts:
            if not t.strip():
                raise EmptyText("cannot embed empty text")
        out: list[Embedding] = []
        for i in range(0, len(texts), self._batch_size):
            out.extend(self._post(texts[i : i + self._batch_size]))
        return out


@lru_cache(maxsize=8)
def build_embedder(spec: EmbedderSpec) -> Embedder:
    if spec.kind == "hash_stub":
        return HashEmbedder(dim=spec.dim, seed=spec.seed)
    return RemoteEmbedder(spec)


def embed_text(spec: EmbedderSpec, text: str) -> Embedding:
    return build_embedder(spec).embed(text)


def cosine(a: Embedding, b: Embedding) -> float:
    """Cosine similarity clamped to [-1, 1] against float rounding.

    Computed in float64 regardless of storage dtype; for identical inputs
    the result is bit-stable.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(a.dim, b.dim)
    av = a.values.astype(np.float64, copy=False)
    bv = b.values.astype(np.float64, copy=False)
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        return 0.0
    sim = float(np.dot(av, bv)) / (na * nb)
    return max(-1.0, min(1.0, sim))


def dot_unit(a: Embedding, b: Embedding) -> float:
    """Dot product for pre-normalized vectors, clamped to [-1, 1].

    This is the similarity the store uses: all stored vectors are unit norm,
    so ranking by dot equals ranking by cosine with fewer operations.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(a.dim, b.dim)
    sim = float(np.dot(a.values, b.values))
    return max(-1.0, min(1.0, sim))
