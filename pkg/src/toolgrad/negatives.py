"""Distractor tools: rank the library by embedding similarity to a sample's positives."""

from __future__ import annotations

import hashlib
import json
import time
from collections import Counter
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .models import ApiSpec
from .tools import Registry

HASHED_DIM = 256
NGRAM = 3


class EmbeddingError(RuntimeError):
    pass


class EmbeddingProvider(Protocol):
    tag: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


@lru_cache(maxsize=65536)
def _gram_vector(gram: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}|{gram}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    vec.setflags(write=False)
    return vec


class HashedLocalEmbedder:
    """Seeded Gaussian random projection of character n-gram counts.

    Offline and deterministic; the projection row for each n-gram is derived
    from a hash of (seed, n-gram) so no matrix is ever materialized.
    """

    tag = "hashed-local"

    def __init__(self, dim: int = HASHED_DIM, seed: int = 0, n: int = NGRAM) -> None:
        self.dim = dim
        self.seed = seed
        self.n = n

    def _one(self, text: str) -> np.ndarray:
        padded = f" {text.lower()} "
        grams = Counter(padded[i : i + self.n] for i in range(max(len(padded) - self.n + 1, 1)))
        out = np.zeros(self.dim)
        for gram in sorted(grams):
            out += grams[gram] * _gram_vector(gram, self.seed, self.dim)
        return out

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._one(t) for t in texts]) if texts else np.zeros((0, self.dim))


class RemoteEmbedder:
    """POSTs ``{model, input}`` to ``{base_url}/embeddings`` (OpenAI-compatible)."""

    tag = "remote"

    def __init__(
        self,
        base_url: str,
        model: str = "text-embedding-3-small",
        api_key: str | None = None,
        batch_size: int = 256,
        retries: int = 2,
        client: httpx.Client | None = None,
    ) -> None:
        self.url = base_url.rstrip("/") + "/embeddings"
        self.model = model
        self.api_key = api_key
        self.batch_size = batch_size
        self.retries = retries
        self._client = client or httpx.Client(timeout=60)

    def _post(self, batch: Sequence[str]) -> list[list[float]]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.url, json={"model": self.model, "input": list(batch)}, headers=headers)
                resp.raise_for_status()
                data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
                return [d["embedding"] for d in data]
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                if attempt == self.retries:
                    raise EmbeddingError(f"embedding request failed: {exc}") from exc
                time.sleep(0.5 * 2**attempt)
        raise AssertionError("unreachable")

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows: list[list[float]] = []
        for i in range(0, len(texts), self.batch_size):
            rows.extend(self._post(texts[i : i + self.batch_size]))
        return np.asarray(rows, dtype=float)


def embed_api(spec: ApiSpec, provider: EmbeddingProvider) -> np.ndarray:
    if not spec.name:
        raise ValueError("cannot embed an API without a name")
    return provider.embed([spec.embed_text])[0]


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


class EmbeddingIndex:
    """api_id -> vector, fixed dimension, with unit-normalized rows for scanning."""

    def __init__(self, dim: int, provider_tag: str) -> None:
        self.dim = dim
        self.provider_tag = provider_tag
        self._ids: list[str] = []
        self._pos: dict[str, int] = {}
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, api_id: object) -> bool:
        return api_id in self._pos

    def add(self, api_id: str, vector: Sequence[float]) -> None:
        vec = np.asarray(vector, dtype=float)
        if vec.shape != (self.dim,):
            raise ValueError(f"vector for {api_id!r} has shape {vec.shape}, index dim is {self.dim}")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"vector for {api_id!r} has non-finite entries")
        if api_id in self._pos:
            self._rows[self._pos[api_id]] = vec
        else:
            self._pos[api_id] = len(self._ids)
            self._ids.append(api_id)
            self._rows.append(vec)
        self._matrix = None

    def row(self, api_id: str) -> int:
        return self._pos[api_id]

    def vector(self, api_id: str) -> np.ndarray:
        return self._rows[self._pos[api_id]]

    def ids(self) -> list[str]:
        return list(self._ids)

    def normalized(self) -> tuple[list[str], np.ndarray]:
        if self._matrix is None:
            m = np.stack(self._rows) if self._rows else np.zeros((0, self.dim))
            norms = np.linalg.norm(m, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ValueError("index holds a zero vector")
            self._matrix = m / norms
        return self._ids, self._matrix

    def covers(self, reg: Registry) -> bool:
        return all(a in self._pos for a in reg.ids())

    @classmethod
    def build(cls, reg: Registry, provider: EmbeddingProvider, dim: int | None = None) -> EmbeddingIndex:
        specs = list(reg)
        vecs = provider.embed([s.embed_text for s in specs])
        index = cls(dim or (vecs.shape[1] if len(specs) else HASHED_DIM), provider.tag)
        for spec, vec in zip(specs, vecs):
            index.add(spec.id, vec)
        return index

    def save(self, path: str | Path) -> None:
        payload = {"dim": self.dim, "provider": self.provider_tag,
                   "vectors": {i: [float(x) for x in self.vector(i)] for i in self._ids}}
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> EmbeddingIndex:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        index = cls(int(payload["dim"]), payload.get("provider", "remote"))
        for api_id, vec in payload["vectors"].items():
            index.add(api_id, vec)
        return index


# scores equal to this many decimals are ties, broken by ascending id
SCORE_DECIMALS = 12


def candidate_scores(positives: Iterable[str], index: EmbeddingIndex, aggregate: str = "max") -> dict[str, float]:
    ids, matrix = index.normalized()
    pos_rows = [index.row(p) for p in positives]
    sims = matrix @ matrix[pos_rows].T
    agg = sims.max(axis=1) if aggregate == "max" else sims.mean(axis=1)
    return {i: round(float(s), SCORE_DECIMALS) for i, s in zip(ids, agg)}


def sample_negatives(
    positives: Iterable[str],
    reg: Registry,
    index: EmbeddingIndex,
    p: int,
    aggregate: str = "max",
) -> list[str]:
    """The ``p - n`` non-positive APIs most similar to the positives.

    A candidate's score is its max (or mean) cosine to the positives; ties
    at :data:`SCORE_DECIMALS` decimals go to the smaller id.
    """
    pos = sorted(set(positives))
    if len(pos) > p:
        raise ValueError(f"{len(pos)} positives exceed p={p}; raise p")
    if aggregate not in ("max", "mean"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    missing = [i for i in reg.ids() if i not in index] + [i for i in pos if i not in index]
    if missing:
        raise ValueError(f"embedding index is missing {len(missing)} api(s), e.g. {missing[:3]}")
    want = min(p - len(pos), len(reg) - len([i for i in pos if i in reg]))
    if want <= 0:
        return []
    scores = candidate_scores(pos, index, aggregate)
    excluded = set(pos)
    candidates = [i for i in reg.ids() if i not in excluded]
    candidates.sort(key=lambda i: (-scores[i], i))
    return candidates[:want]


def hashed_index(reg: Registry, seed: int = 0, dim: int = HASHED_DIM) -> EmbeddingIndex:
    return EmbeddingIndex.build(reg, HashedLocalEmbedder(dim, seed), dim)


def index_from_mapping(vectors: Mapping[str, Sequence[float]], provider_tag: str = "remote") -> EmbeddingIndex:
    items = list(vectors.items())
    index = EmbeddingIndex(len(items[0][1]) if items else HASHED_DIM, provider_tag)
    for api_id, vec in items:
        index.add(api_id, vec)
    return index
