"""Text embedding providers, a durable vector cache, cosine similarity and reduction.

Cache file layout (little-endian, append-only)::

    magic   8 bytes   b"DRIFEMB1"
    hlen    uint32    length of the JSON header in bytes
    header  hlen      UTF-8 JSON {"provider_id", "model_id", "dim"}
    records repeated  key (32 bytes, sha256 of provider/model/text)
                      dim (uint32)
                      values (dim x float32)

A truncated trailing record (interrupted write) is ignored on open.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np
from filelock import FileLock

from ._io import read_jsonl
from .errors import DimensionMismatch, EmbeddingError, ReductionError, TransportError

logger = logging.getLogger(__name__)

DEFAULT_DIM = 384
_MAGIC = b"DRIFEMB1"
_TOKEN = re.compile(r"\w+", re.UNICODE)

# parameters used upstream when reduced vectors are produced externally with UMAP
UMAP_PROVENANCE = {"n_components": 50, "n_neighbors": 30, "min_dist": 0.0, "metric": "cosine"}


class EmbeddingProvider(Protocol):
    provider_id: str
    model_id: str
    dim: int

    def embed(self, texts: Sequence[str]) -> Sequence[Sequence[float]]: ...


class HashingEmbedder:
    """Deterministic offline embedder: hashed bag of words, non-negative counts.

    Useful for tests and desk-scale runs. Two texts are similar exactly when
    they share (case-folded) word tokens.
    """

    provider_id = "mock-hashing"

    def __init__(self, dim: int = DEFAULT_DIM, model_id: str = "hashed-bow-v1"):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.model_id = model_id
        self.calls = 0

    def _index(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        self.calls += 1
        out = []
        for text in texts:
            vec = [0.0] * self.dim
            for tok in _TOKEN.findall(text.casefold()):
                vec[self._index(tok)] += 1.0
            out.append(vec)
        return out


class HttpEmbedder:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    provider_id = "http"

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int = DEFAULT_DIM,
        api_key: str | None = None,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_id = model
        self.dim = dim
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    @classmethod
    def from_env(cls, model: str, dim: int = DEFAULT_DIM, **kw) -> "HttpEmbedder":
        url = os.environ.get("DRIFORGE_EMBED_URL")
        if not url:
            raise EmbeddingError("DRIFORGE_EMBED_URL is not set")
        return cls(url, model, dim, api_key=os.environ.get("DRIFORGE_EMBED_KEY"), **kw)

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        try:
            resp = self._client.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model_id, "input": list(texts)},
                headers=self._headers,
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"embedding request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"embedding endpoint returned {resp.status_code}: {resp.text[:200]}")
        data = resp.json().get("data")
        if not isinstance(data, list) or len(data) != len(texts):
            raise EmbeddingError("embedding response does not match the request size")
        if all("index" in d for d in data):
            data = sorted(data, key=lambda d: d["index"])
        return [d["embedding"] for d in data]


def _cache_key(provider_id: str, model_id: str, text: str) -> bytes:
    return hashlib.sha256(f"{provider_id}\x1f{model_id}\x1f{text}".encode("utf-8")).digest()


class EmbeddingCache:
    """Vectors keyed by (provider, model, text hash); optionally persisted to one file."""

    def __init__(self, provider_id: str, model_id: str, dim: int, path: str | os.PathLike | None = None):
        self.provider_id = provider_id
        self.model_id = model_id
        self.dim = dim
        self.path = Path(path) if path is not None else None
        self._entries: dict[bytes, np.ndarray] = {}
        self._write_lock = threading.Lock()
        if self.path is not None:
            self._load_or_create()

    @classmethod
    def for_provider(cls, provider: EmbeddingProvider, path=None) -> "EmbeddingCache":
        return cls(provider.provider_id, provider.model_id, provider.dim, path)

    def _header(self) -> bytes:
        return json.dumps(
            {"provider_id": self.provider_id, "model_id": self.model_id, "dim": self.dim}, sort_keys=True
        ).encode("utf-8")

    def _load_or_create(self) -> None:
        assert self.path is not None
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            header = self._header()
            with open(self.path, "wb") as fh:
                fh.write(_MAGIC + struct.pack("<I", len(header)) + header)
            return
        raw = self.path.read_bytes()
        if raw[:8] != _MAGIC:
            raise EmbeddingError(f"{self.path} is not an embedding cache file")
        (hlen,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12 : 12 + hlen])
        if header["dim"] != self.dim:
            raise DimensionMismatch(f"cache {self.path} holds dim {header['dim']}, expected {self.dim}")
        if (header["provider_id"], header["model_id"]) != (self.provider_id, self.model_id):
            raise EmbeddingError(
                f"cache {self.path} belongs to {header['provider_id']}/{header['model_id']}, "
                f"not {self.provider_id}/{self.model_id}"
            )
        pos = 12 + hlen
        rec_size = 36 + 4 * self.dim
        while pos + rec_size <= len(raw):
            key = raw[pos : pos + 32]
            (dim,) = struct.unpack_from("<I", raw, pos + 32)
            if dim != self.dim:
                raise DimensionMismatch(f"cache {self.path} has a record of dim {dim}")
            vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos + 36).copy()
            self._entries[key] = vec
            pos += rec_size
        if pos != len(raw):
            logger.warning("ignoring %d trailing bytes in %s", len(raw) - pos, self.path)

    def __len__(self) -> int:
        return len(self._entries)

    def key(self, text: str) -> bytes:
        return _cache_key(self.provider_id, self.model_id, text)

    def get(self, text: str) -> np.ndarray | None:
        vec = self._entries.get(self.key(text))
        return None if vec is None else vec.astype(np.float64)

    def put_many(self, texts: Sequence[str], vectors: Sequence[Sequence[float]]) -> None:
        packed = []
        with self._write_lock:
            for text, values in zip(texts, vectors):
                vec = np.asarray(values, dtype=np.float64)
                if vec.shape != (self.dim,):
                    raise DimensionMismatch(
                        f"vector of dim {vec.size} cannot enter a dim-{self.dim} cache", [text[:60]]
                    )
                if not np.all(np.isfinite(vec)):
                    raise EmbeddingError("non-finite embedding value", [text[:60]])
                key = self.key(text)
                if key in self._entries:
                    continue
                f32 = vec.astype("<f4")
                self._entries[key] = f32
                packed.append(key + struct.pack("<I", self.dim) + f32.tobytes())
            if packed and self.path is not None:
                with FileLock(str(self.path) + ".lock"):
                    with open(self.path, "ab") as fh:
                        fh.write(b"".join(packed))
                        fh.flush()
                        os.fsync(fh.fileno())

    def export_jsonl(self, path) -> int:
        with open(path, "w", encoding="utf-8") as fh:
            for key, vec in self._entries.items():
                fh.write(json.dumps({"hash": key.hex(), "vec": [float(x) for x in vec]}) + "\n")
        return len(self._entries)

    def import_jsonl(self, path) -> int:
        packed = []
        n = 0
        with self._write_lock:
            for row in read_jsonl(path):
                key = bytes.fromhex(row["hash"])
                vec = np.asarray(row["vec"], dtype="<f4")
                if vec.shape != (self.dim,):
                    raise DimensionMismatch(f"imported vector of dim {vec.size}, cache dim {self.dim}")
                if key not in self._entries:
                    self._entries[key] = vec
                    packed.append(key + struct.pack("<I", self.dim) + vec.tobytes())
                    n += 1
            if packed and self.path is not None:
                with FileLock(str(self.path) + ".lock"), open(self.path, "ab") as fh:
                    fh.write(b"".join(packed))
        return n


def _call_with_retry(fn: Callable[[], object], what: str, max_attempts: int, backoff: float, sleep) -> object:
    for attempt in range(1, max_attempts + 1):
        try:
            return fn()
        except (TransportError, httpx.HTTPError) as exc:
            if attempt == max_attempts:
                raise EmbeddingError(f"{what} failed after {max_attempts} attempts: {exc}") from exc
            logger.warning("%s attempt %d failed: %s", what, attempt, exc)
            sleep(backoff * 2 ** (attempt - 1))
    raise AssertionError("unreachable")


def embed_batch(
    texts: Sequence[str],
    provider: EmbeddingProvider,
    cache: EmbeddingCache,
    batch_size: int = 64,
    max_attempts: int = 3,
    backoff: float = 0.5,
    parallelism: int = 1,
    sleep: Callable[[float], None] = time.sleep,
) -> list[np.ndarray]:
    """Embed ``texts`` cache-first; misses go to ``provider`` in bounded batches.

    Returned vectors are float64 promotions of the stored float32 values, in
    input order, and are persisted before this returns.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if (cache.provider_id, cache.model_id) != (provider.provider_id, provider.model_id):
        raise EmbeddingError("cache and provider disagree on provider/model identity")
    if cache.dim != provider.dim:
        raise DimensionMismatch(f"provider dim {provider.dim} != cache dim {cache.dim}")

    missing = list(dict.fromkeys(t for t in texts if cache.get(t) is None))
    batches = [missing[i : i + batch_size] for i in range(0, len(missing), batch_size)]

    def run(index_batch):
        index, batch = index_batch
        vectors = _call_with_retry(
            lambda: provider.embed(batch), f"embedding batch {index}", max_attempts, backoff, sleep
        )
        if len(vectors) != len(batch):
            raise EmbeddingError(f"embedding batch {index}: got {len(vectors)} vectors for {len(batch)} texts")
        for v in vectors:
            if len(v) != cache.dim:
                raise DimensionMismatch(f"embedding batch {index}: provider returned dim {len(v)}, cache dim {cache.dim}")
        cache.put_many(batch, vectors)

    if parallelism > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            list(pool.map(run, enumerate(batches)))
    else:
        for item in enumerate(batches):
            run(item)
    return [cache.get(t) for t in texts]


def as_vector(values: Sequence[float], dim: int | None = None) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise EmbeddingError("embedding must be a non-empty 1-d array")
    if dim is not None and vec.size != dim:
        raise DimensionMismatch(f"expected dim {dim}, got {vec.size}")
    if not np.all(np.isfinite(vec)):
        raise EmbeddingError("embedding has non-finite values")
    return vec


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    u = as_vector(u)
    v = as_vector(v)
    if u.size != v.size:
        raise DimensionMismatch(f"cosine of dim {u.size} and dim {v.size} vectors")
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        raise EmbeddingError("cosine similarity is undefined for the zero vector")
    return max(-1.0, min(1.0, float(np.dot(u, v)) / (nu * nv)))


def unit_rows(matrix: np.ndarray, ids: Sequence[str] | None = None) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise EmbeddingError("expected a 2-d matrix of vectors")
    if not np.all(np.isfinite(m)):
        raise EmbeddingError("matrix has non-finite values")
    norms = np.linalg.norm(m, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        names = [ids[i] for i in zero] if ids is not None else [str(i) for i in zero]
        raise EmbeddingError(f"{zero.size} zero vector(s) cannot be compared by cosine", names)
    return m / norms[:, None]


def cosine_matrix(a: np.ndarray, b: np.ndarray, a_ids=None, b_ids=None) -> np.ndarray:
    ua = unit_rows(a, a_ids)
    ub = unit_rows(b, b_ids)
    if ua.shape[1] != ub.shape[1]:
        raise DimensionMismatch(f"dim {ua.shape[1]} vs dim {ub.shape[1]}")
    return np.clip(ua @ ub.T, -1.0, 1.0)


@dataclass(frozen=True)
class ReductionSpec:
    method: str = "none"
    target_dim: int = 50
    metric: str = "cosine"
    params: dict = field(default_factory=dict)
    import_path: str | None = None

    def __post_init__(self):
        if self.method not in ("none", "pca", "external_import"):
            raise ReductionError(f"unknown reduction method {self.method!r}")
        if self.target_dim < 1:
            raise ReductionError("target_dim must be positive")
        if self.metric != "cosine":
            raise ReductionError("only the cosine metric is supported")
        if self.method == "external_import" and not self.import_path:
            raise ReductionError("external_import requires an import file")

    @classmethod
    def parse(cls, text: str, target_dim: int = 50) -> "ReductionSpec":
        """Build from CLI form: ``none``, ``pca`` or ``import:<path>``."""
        if text.startswith("import:"):
            return cls("external_import", target_dim, params=dict(UMAP_PROVENANCE), import_path=text[7:])
        return cls(text, target_dim)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "target_dim": self.target_dim,
            "metric": self.metric,
            "params": dict(self.params),
            "import_path": self.import_path,
        }


def pca(matrix: np.ndarray, target_dim: int) -> np.ndarray:
    """Project mean-centred rows onto the leading ``target_dim`` principal directions.

    Each direction is signed so its largest-magnitude component is positive.
    """
    x = np.asarray(matrix, dtype=np.float64)
    n, d = x.shape
    if target_dim > d:
        raise ReductionError(f"target_dim {target_dim} exceeds input dim {d}")
    if n < target_dim:
        raise ReductionError(f"pca needs at least {target_dim} vectors, got {n}")
    centred = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    components = vt[:target_dim].copy()
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), pivots])
    signs[signs == 0] = 1.0
    components *= signs[:, None]
    return centred @ components.T


def reduce(matrix: np.ndarray, spec: ReductionSpec, ids: Sequence[str] | None = None) -> np.ndarray:
    """Reduce every row of ``matrix`` in one call.

    Anchors and paragraphs must go through the same call so they share a space.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise ReductionError("expected a 2-d matrix")
    if spec.method == "none":
        return x
    if spec.method == "pca":
        return pca(x, spec.target_dim)
    rows = list(read_jsonl(spec.import_path))
    if len(rows) != x.shape[0]:
        raise ReductionError(f"import file has {len(rows)} rows for {x.shape[0]} input vectors")
    if ids is None:
        raise ReductionError("external_import needs ids to align rows")
    by_id = {r["id"]: r["vec"] for r in rows}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ReductionError("import file lacks rows for some ids", missing)
    out = np.asarray([by_id[i] for i in ids], dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != spec.target_dim:
        raise ReductionError(f"imported vectors are not of dim {spec.target_dim}")
    return out
