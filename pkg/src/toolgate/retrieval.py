"""Embedding-based tool retrieval: exact top-k cosine search over tool specs.

Two embedders are provided.  ``HashingEmbedder`` is a deterministic hashed
bag-of-tokens model used for hermetic runs and tests; ``RemoteEmbedder``
talks to an OpenAI-compatible ``/embeddings`` endpoint.  An index records the
fingerprint of the embedder that built it and refuses queries embedded by
anything else.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import re
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal, Protocol, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    EmbeddingIntegrityError,
    FingerprintMismatchError,
    ProviderError,
    RegistryIntegrityError,
    ToolgateError,
)
from .registry import FORMAT_VERSION, ToolRegistry, dump_line, read_ndjson
from .toolspec import ToolSpec

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 10
# scores closer than this are ties and fall back to name order
TIE_EPS = 1e-12
TIE_WINDOW = 1e-9
HASH_SCHEME = "hashed-bow-v1"

_STOPWORDS = frozenset(
    """a an and are as at be by for from in is it of on or that the this to with
    type properties description required arguments items string object integer
    boolean number array format name""".split()
)
_CAMEL = re.compile(r"(?<=[a-z0-9])(?=[A-Z])|(?<=[A-Z])(?=[A-Z][a-z])")
_TOKEN = re.compile(r"[a-z0-9]+")


def canonical_tool_text(spec: ToolSpec) -> str:
    """The exact string embedded for a tool: sorted-key compact JSON."""
    return dump_line({"name": spec.name, "description": spec.description, "arguments": spec.arguments})


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN.findall(_CAMEL.sub(" ", text).lower()) if t not in _STOPWORDS]


# ---------------------------------------------------------------------------
# vectors


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    norm: float

    @classmethod
    def of(cls, values: Sequence[float] | np.ndarray) -> EmbeddingVector:
        arr = np.asarray(values, dtype=np.float64)
        return cls(arr, float(np.linalg.norm(arr)))

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dimension != b.dimension:
        raise ValueError(f"dimension mismatch: {a.dimension} vs {b.dimension}")
    if a.norm == 0.0 or b.norm == 0.0:
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return float(min(1.0, max(-1.0, float(np.dot(a.values, b.values)) / (a.norm * b.norm))))


# ---------------------------------------------------------------------------
# embedders


@dataclass(frozen=True)
class EmbedderConfig:
    """Embedder selection.  Credentials never live here, only the env-var name."""

    provider: Literal["local_fallback", "remote"] = "local_fallback"
    dimension: int | None = 256
    seed: int = 0
    endpoint: str | None = None
    model: str | None = None
    auth_env: str | None = None
    batch_size: int = 64
    max_in_flight: int = 4
    max_retries: int = 4
    backoff: float = 0.5
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.provider == "local_fallback":
            if self.dimension is None or self.dimension < 64:
                raise ConfigurationError("local_fallback embedder needs dimension >= 64")
        elif self.provider == "remote":
            if not self.model:
                raise ConfigurationError("remote embedder needs a model identifier")
            if not self.endpoint:
                raise ConfigurationError("remote embedder needs an endpoint URL")
        else:
            raise ConfigurationError(f"unknown embedder provider {self.provider!r}")
        if self.batch_size < 1 or self.max_in_flight < 1:
            raise ConfigurationError("batch_size and max_in_flight must be >= 1")

    def fingerprint(self) -> str:
        if self.provider == "local_fallback":
            ident = {"provider": self.provider, "scheme": HASH_SCHEME, "dimension": self.dimension, "seed": self.seed}
        else:
            ident = {"provider": self.provider, "model": self.model, "dimension": self.dimension}
        return hashlib.sha256(dump_line(ident).encode()).hexdigest()[:16]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EmbedderConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown embedder settings: {sorted(unknown)}")
        return cls(**d)


class Embedder(Protocol):
    config: EmbedderConfig

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Signed feature hashing of tokens with ``1 + ln(tf)`` weights, L2-normalised."""

    def __init__(self, config: EmbedderConfig):
        self.config = config
        self.dimension = int(config.dimension or 0)
        self._key = config.seed.to_bytes(8, "little", signed=True)
        self._slots: dict[str, tuple[int, float]] = {}

    def _slot(self, token: str) -> tuple[int, float]:
        slot = self._slots.get(token)
        if slot is None:
            h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8, key=self._key).digest(), "little")
            slot = (h % self.dimension, 1.0 if h >> 63 else -1.0)
            self._slots[token] = slot
        return slot

    def embed_one(self, text: str) -> np.ndarray:
        counts = sorted(Counter(tokenize(text)).items())
        vec = self._accumulate(counts, signed=True)
        if counts and not vec.any():
            # colliding tokens cancelled exactly; fall back to unsigned buckets
            vec = self._accumulate(counts, signed=False)
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec /= norm
        return vec

    def _accumulate(self, counts: list[tuple[str, int]], signed: bool) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token, tf in counts:
            idx, sign = self._slot(token)
            vec[idx] += (sign if signed else 1.0) * (1.0 + math.log(tf))
        return vec

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            raise ValueError("nothing to embed")
        return np.vstack([self.embed_one(t) for t in texts])


class RemoteEmbedder:
    """Client for an OpenAI-compatible embeddings endpoint."""

    RETRYABLE = {408, 409, 429, 500, 502, 503, 504}

    def __init__(self, config: EmbedderConfig):
        self.config = config

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env:
            token = os.environ.get(self.config.auth_env)
            if not token:
                raise ConfigurationError(f"environment variable {self.config.auth_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, batch: Sequence[str]) -> list[list[float]]:
        cfg = self.config
        payload: dict[str, Any] = {"model": cfg.model, "input": list(batch)}
        if cfg.dimension:
            payload["dimensions"] = cfg.dimension
        body = json.dumps(payload).encode()
        headers = self._headers()
        last = "no attempt made"
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                time.sleep(min(cfg.backoff * 2 ** (attempt - 1), 8.0))
            req = urllib.request.Request(cfg.endpoint or "", data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
                    doc = json.loads(resp.read().decode("utf-8"))
                rows = sorted(doc["data"], key=lambda r: r.get("index", 0))
                return [r["embedding"] for r in rows]
            except urllib.error.HTTPError as exc:
                message = _error_message(exc)
                if exc.code in (401, 403):
                    raise ConfigurationError(f"embedding provider rejected credentials ({exc.code}): {message}") from exc
                if exc.code not in self.RETRYABLE:
                    raise ProviderError(f"embedding provider error {exc.code}: {message}") from exc
                last = f"{exc.code}: {message}"
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last = str(exc)
            except (KeyError, TypeError, ValueError) as exc:
                raise ProviderError(f"malformed embedding response: {exc}") from exc
            log.warning("embedding request failed (attempt %d): %s", attempt + 1, last)
        raise ProviderError(f"embedding provider unavailable after {cfg.max_retries + 1} attempts: {last}")

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            raise ValueError("nothing to embed")
        size = self.config.batch_size
        batches = [texts[i : i + size] for i in range(0, len(texts), size)]
        with ThreadPoolExecutor(max_workers=min(self.config.max_in_flight, len(batches))) as pool:
            results = list(pool.map(self._post, batches))
        rows = [row for batch, out in zip(batches, results) for row in _check_batch(batch, out)]
        dims = {len(r) for r in rows}
        if len(dims) != 1:
            raise EmbeddingIntegrityError(f"embedding dimension drift: {sorted(dims)}")
        dim = dims.pop()
        if self.config.dimension and dim != self.config.dimension:
            raise EmbeddingIntegrityError(f"provider returned dimension {dim}, expected {self.config.dimension}")
        return np.asarray(rows, dtype=np.float64)


def _check_batch(batch: Sequence[str], out: list[list[float]]) -> list[list[float]]:
    if len(out) != len(batch):
        raise EmbeddingIntegrityError(f"provider returned {len(out)} vectors for {len(batch)} inputs")
    return out


def _error_message(exc: urllib.error.HTTPError) -> str:
    try:
        raw = exc.read().decode("utf-8", "replace")
    except Exception:  # noqa: BLE001 - best effort only
        return exc.reason or ""
    try:
        err = json.loads(raw).get("error")
        if isinstance(err, dict) and "message" in err:
            return str(err["message"])
        if isinstance(err, str):
            return err
    except (ValueError, AttributeError):
        pass
    return raw[:500]


def make_embedder(config: EmbedderConfig) -> Embedder:
    if config.provider == "remote":
        return RemoteEmbedder(config)
    return HashingEmbedder(config)


def embed(texts: Sequence[str], config: EmbedderConfig) -> list[EmbeddingVector]:
    matrix = make_embedder(config).embed(list(texts))
    return [EmbeddingVector.of(row) for row in matrix]


# ---------------------------------------------------------------------------
# index and search


@dataclass(frozen=True)
class RetrievalQuery:
    text: str
    k: int = DEFAULT_TOP_K

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError("query text must be non-empty")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class Hit:
    name: str
    score: float


@dataclass(frozen=True)
class RetrievalResult:
    hits: list[Hit]
    query_echo: str

    @property
    def names(self) -> list[str]:
        return [h.name for h in self.hits]


@dataclass
class ToolIndex:
    names: list[str]
    matrix: np.ndarray
    config: EmbedderConfig
    norms: np.ndarray = field(init=False)
    _rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.names):
            raise EmbeddingIntegrityError("index matrix shape does not match tool names")
        if len(set(self.names)) != len(self.names):
            raise EmbeddingIntegrityError("duplicate tool names in index")
        self.norms = np.linalg.norm(self.matrix, axis=1)
        zero = np.flatnonzero(self.norms == 0.0)
        if zero.size:
            raise EmbeddingIntegrityError(f"zero embedding vector for tool {self.names[zero[0]]!r}")
        order = np.argsort(np.asarray(self.names, dtype=object), kind="stable")
        self._rank = np.empty(len(self.names), dtype=np.int64)
        self._rank[order] = np.arange(len(self.names))

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.names)

    def vector(self, name: str) -> EmbeddingVector:
        return EmbeddingVector.of(self.matrix[self.names.index(name)])

    def scores(self, query_vec: np.ndarray) -> np.ndarray:
        qn = float(np.linalg.norm(query_vec))
        if qn == 0.0:
            raise ValueError("query has no indexable content (zero embedding)")
        return np.clip((self.matrix @ query_vec) / (self.norms * qn), -1.0, 1.0)

    def top_k(self, query_vec: np.ndarray, k: int) -> list[Hit]:
        scores = self.scores(np.asarray(query_vec, dtype=np.float64))
        n = len(self.names)
        k = min(k, n)
        if k < n:
            # widen the cut so a tie group straddling the k-th score is kept whole
            threshold = np.partition(scores, n - k)[n - k] - TIE_WINDOW
            cand = np.flatnonzero(scores >= threshold)
        else:
            cand = np.arange(n)
        cand = cand[np.lexsort((self._rank[cand], -scores[cand]))]
        s = scores[cand]
        # single-linkage groups of scores closer than TIE_EPS; groups rank by name
        group = np.concatenate(([0], np.cumsum(np.diff(s) < -TIE_EPS)))
        order = np.lexsort((self._rank[cand], group))[:k]
        head = s[np.searchsorted(group, group, side="left")]
        return [Hit(self.names[cand[i]], float(head[i])) for i in order]

    def extended(self, names: list[str], matrix: np.ndarray) -> ToolIndex:
        """New index with extra rows appended (rebuild-and-swap)."""
        return ToolIndex(self.names + names, np.vstack([self.matrix, matrix]), self.config)


def build_index(registry: ToolRegistry, config: EmbedderConfig, embedder: Embedder | None = None) -> ToolIndex:
    if len(registry) == 0:
        raise ToolgateError("cannot build an index over an empty registry")
    embedder = embedder or make_embedder(config)
    names = registry.names()
    matrix = embedder.embed([canonical_tool_text(t) for t in registry])
    return ToolIndex(names, matrix, config)


def embed_tools(specs: Sequence[ToolSpec], embedder: Embedder) -> np.ndarray:
    return embedder.embed([canonical_tool_text(t) for t in specs])


def search(index: ToolIndex, query: RetrievalQuery, embedder: Embedder) -> RetrievalResult:
    if embedder.config.fingerprint() != index.fingerprint:
        raise FingerprintMismatchError(
            f"query embedder {embedder.config.fingerprint()} does not match index embedder {index.fingerprint}"
        )
    qvec = embedder.embed([query.text])[0]
    if qvec.shape[0] != index.dimension:
        raise EmbeddingIntegrityError(f"query dimension {qvec.shape[0]} != index dimension {index.dimension}")
    return RetrievalResult(index.top_k(qvec, query.k), query.text)


def save_index(index: ToolIndex, path: str | Path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "tool_index",
        "fingerprint": index.fingerprint,
        "embedder": index.config.to_dict(),
        "dimension": index.dimension,
        "count": len(index),
        "encoding": "base64-float64-le",
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_line(header) + "\n")
        for name, row in zip(index.names, index.matrix):
            vec = base64.b64encode(row.astype("<f8").tobytes()).decode("ascii")
            fh.write(dump_line({"name": name, "vector": vec}) + "\n")
    tmp.replace(path)


def load_index(path: str | Path) -> ToolIndex:
    header, body = read_ndjson(path, "index")
    if header.get("kind") != "tool_index":
        raise RegistryIntegrityError(f"{path} is not a tool index file")
    config = EmbedderConfig.from_dict(header["embedder"])
    if config.fingerprint() != header.get("fingerprint"):
        raise RegistryIntegrityError(f"{path}: embedder fingerprint does not match its recorded config")
    dim = int(header["dimension"])
    names = []
    matrix = np.empty((len(body), dim), dtype=np.float64)
    for i, rec in enumerate(body):
        raw = base64.b64decode(rec["vector"])
        if len(raw) != dim * 8:
            raise RegistryIntegrityError(f"{path}: vector for {rec.get('name')!r} has wrong length")
        matrix[i] = np.frombuffer(raw, dtype="<f8")
        names.append(rec["name"])
    return ToolIndex(names, matrix, config)
