"""Text -> unit vector embedding, with a content-addressed on-disk cache.

Two providers are available: ``local_hash`` (deterministic feature hashing,
used for offline runs and tests) and ``remote`` (an OpenAI-compatible
``/v1/embeddings`` endpoint).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DIM = 1536
LOCAL_MODEL_TAG = "local-hash-v1"
DEFAULT_REMOTE_MODEL = "text-embedding-3-small"
BINARY_MAGIC = b"CDEV1"


class EmbeddingError(Exception):
    """Embedding could not be produced (provider failure, empty corpus...)."""


class ContractError(EmbeddingError):
    """A provider returned vectors that violate the matrix contract."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_backoff_ms: float = 500
    multiplier: float = 2

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay(self, attempt: int) -> float:
        """Seconds to wait after failed attempt number ``attempt`` (0-based)."""
        return self.base_backoff_ms * self.multiplier**attempt / 1000.0


@dataclass(frozen=True)
class ProviderConfig:
    kind: Literal["remote", "local_hash"] = "local_hash"
    model_name: str = LOCAL_MODEL_TAG
    dim: int = DEFAULT_DIM
    batch_size: int = 256
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be positive")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Row-aligned ids and unit-norm float32 vectors."""

    ids: tuple[str, ...]
    rows: np.ndarray
    model_tag: str

    def __post_init__(self):
        rows = self.rows
        if rows.ndim != 2 or rows.shape[0] != len(self.ids):
            raise ContractError(f"rows shape {rows.shape} does not match {len(self.ids)} ids")
        if not np.all(np.isfinite(rows)):
            raise ContractError("embedding rows contain non-finite values")

    @classmethod
    def from_vectors(cls, ids: Sequence[str], vectors, model_tag: str) -> "EmbeddingMatrix":
        """Build a matrix, L2-normalizing every row in float64 before storing as float32."""
        arr = np.asarray(vectors, dtype=np.float64)
        if arr.ndim != 2:
            raise ContractError("vectors must form a 2-D array")
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ContractError("cannot normalize a zero vector")
        return cls(tuple(ids), (arr / norms).astype(np.float32), model_tag)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "EmbeddingMatrix":
        index = np.asarray(index)
        return EmbeddingMatrix(tuple(self.ids[i] for i in index), self.rows[index], self.model_tag)


# ---------------------------------------------------------------------------
# local hashing provider


def _hash64(feature: str) -> int:
    return int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")


def text_features(text: str) -> list[str]:
    """Namespaced token and character-trigram features of ``text``."""
    norm = " ".join(text.lower().split())
    feats = ["t:" + tok for tok in norm.split(" ") if tok]
    feats.extend("g:" + norm[i : i + 3] for i in range(len(norm) - 2))
    return feats


def local_hash_embed(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Signed feature-hashing embedding; empty text maps to ``e0``."""
    if dim < 16:
        raise ValueError("dim must be >= 16")
    vec = np.zeros(dim, dtype=np.float64)
    for feat in text_features(text):
        h = _hash64(feat)
        vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    norm = np.linalg.norm(vec)
    if norm == 0:
        vec[:] = 0.0
        vec[0] = 1.0
        return vec
    return vec / norm


class Provider(Protocol):
    model_name: str

    def embed_batch(self, texts: Sequence[str]) -> list[Sequence[float]]: ...


class LocalHashProvider:
    def __init__(self, dim: int = DEFAULT_DIM, model_name: str = LOCAL_MODEL_TAG):
        self.dim = dim
        self.model_name = model_name
        self.calls = 0
        self._lock = threading.Lock()

    def embed_batch(self, texts):
        with self._lock:
            self.calls += 1
        return [local_hash_embed(t, self.dim) for t in texts]


# ---------------------------------------------------------------------------
# remote provider


def api_settings() -> tuple[str, str | None]:
    base = os.environ.get("EMBEDDINGS_API_BASE", "https://api.openai.com").rstrip("/")
    return base, os.environ.get("EMBEDDINGS_API_KEY")


def post_with_retry(
    client,
    url: str,
    payload: dict,
    headers: dict,
    retry: RetryPolicy,
    sleep: Callable[[float], None] = time.sleep,
) -> dict:
    """POST JSON, retrying transport errors, 429 and 5xx with exponential backoff."""
    import httpx

    last: Exception | None = None
    for attempt in range(retry.max_attempts):
        try:
            resp = client.post(url, json=payload, headers=headers)
            if resp.status_code == 429 or resp.status_code >= 500:
                raise httpx.HTTPStatusError(
                    f"server returned {resp.status_code}", request=resp.request, response=resp
                )
            resp.raise_for_status()
            return resp.json()
        except httpx.HTTPStatusError as exc:
            last = exc
            if exc.response.status_code < 500 and exc.response.status_code != 429:
                break
        except (httpx.TransportError, ValueError) as exc:
            last = exc
        if attempt + 1 < retry.max_attempts:
            sleep(retry.delay(attempt))
    raise EmbeddingError(f"request to {url} failed: {last}") from last


class RemoteProvider:
    """Client for an OpenAI-compatible embeddings endpoint."""

    path = "/v1/embeddings"

    def __init__(
        self,
        model_name: str = DEFAULT_REMOTE_MODEL,
        *,
        base_url: str | None = None,
        api_key: str | None = None,
        retry: RetryPolicy | None = None,
        client=None,
        timeout: float = 60.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        import httpx

        env_base, env_key = api_settings()
        self.model_name = model_name
        self.base_url = (base_url or env_base).rstrip("/")
        self.api_key = api_key if api_key is not None else env_key
        self.retry = retry or RetryPolicy()
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep
        self.calls = 0
        self._lock = threading.Lock()

    def embed_batch(self, texts):
        with self._lock:
            self.calls += 1
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = post_with_retry(
            self.client,
            self.base_url + self.path,
            {"model": self.model_name, "input": list(texts)},
            headers,
            self.retry,
            self.sleep,
        )
        try:
            data = sorted(body["data"], key=lambda d: d["index"])
            vectors = [d["embedding"] for d in data]
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed embeddings response: {exc}") from exc
        if len(vectors) != len(texts):
            raise ContractError(f"expected {len(texts)} embeddings, got {len(vectors)}")
        return vectors


def make_provider(config: ProviderConfig, **kwargs) -> Provider:
    if config.kind == "local_hash":
        return LocalHashProvider(config.dim, config.model_name)
    if config.kind == "remote":
        return RemoteProvider(config.model_name, retry=config.retry, **kwargs)
    raise ValueError(f"unknown provider kind {config.kind!r}")


# ---------------------------------------------------------------------------
# cache


def cache_key(model_name: str, text: str) -> str:
    return hashlib.sha256(model_name.encode("utf-8") + b"\0" + text.encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Directory of ``<sha256>.json`` files holding one vector each."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, model_name: str, text: str) -> list[float] | None:
        path = self._path(cache_key(model_name, text))
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        if obj.get("model") != model_name:
            return None
        return obj["vector"]

    def put(self, model_name: str, text: str, vector) -> None:
        vec = [float(x) for x in vector]
        payload = json.dumps({"model": model_name, "dim": len(vec), "vector": vec})
        target = self._path(cache_key(model_name, text))
        with self._write_lock:
            fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(payload)
                os.replace(tmp, target)
            except BaseException:
                Path(tmp).unlink(missing_ok=True)
                raise


class NullCache:
    def get(self, model_name, text):
        return None

    def put(self, model_name, text, vector):
        pass


# ---------------------------------------------------------------------------


def embed_texts(
    ids: Sequence[str],
    texts: Sequence[str],
    config: ProviderConfig,
    cache=None,
    provider: Provider | None = None,
) -> EmbeddingMatrix:
    if not texts:
        raise EmbeddingError("nothing to embed: corpus is empty")
    cache = cache if cache is not None else NullCache()
    provider = provider or make_provider(config)
    model = provider.model_name

    n_empty = sum(1 for t in texts if not t.strip())
    if n_empty:
        logger.warning("%d record(s) have empty text", n_empty)

    vectors: list = [None] * len(texts)
    pending: dict[str, list[int]] = {}
    for i, text in enumerate(texts):
        hit = cache.get(model, text)
        if hit is not None:
            vectors[i] = hit
        else:
            pending.setdefault(text, []).append(i)

    unique = list(pending)
    batches = [unique[s : s + config.batch_size] for s in range(0, len(unique), config.batch_size)]

    def run(batch_index: int):
        batch = batches[batch_index]
        try:
            out = provider.embed_batch(batch)
        except ContractError:
            raise
        except Exception as exc:
            raise EmbeddingError(f"batch {batch_index} failed: {exc}") from exc
        if len(out) != len(batch):
            raise ContractError(f"batch {batch_index}: expected {len(batch)} vectors, got {len(out)}")
        for text, vec in zip(batch, out):
            if len(vec) != config.dim:
                raise ContractError(
                    f"batch {batch_index}: provider returned dimension {len(vec)}, expected {config.dim}"
                )
            cache.put(model, text, vec)
            for i in pending[text]:
                vectors[i] = vec

    if batches:
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            for fut in [pool.submit(run, b) for b in range(len(batches))]:
                fut.result()

    for i, vec in enumerate(vectors):
        if len(vec) != config.dim:
            raise ContractError(f"row {i}: cached vector has dimension {len(vec)}, expected {config.dim}")
    return EmbeddingMatrix.from_vectors(ids, vectors, model)


def embed_corpus(corpus, config: ProviderConfig, cache=None, provider: Provider | None = None) -> EmbeddingMatrix:
    """Embed every record's ``composed_text``; row ``i`` is record ``i``."""
    return embed_texts(corpus.ids, corpus.texts, config, cache, provider)


# ---------------------------------------------------------------------------
# embedding stores


def dump_jsonl(matrix: EmbeddingMatrix) -> str:
    lines = []
    for rid, row in zip(matrix.ids, matrix.rows):
        lines.append(
            json.dumps(
                {"id": rid, "model": matrix.model_tag, "dim": matrix.dim, "vector": row.tolist()},
                ensure_ascii=False,
            )
        )
    return "\n".join(lines) + "\n"


def read_jsonl(path: str | Path) -> EmbeddingMatrix:
    ids, vectors, model = [], [], None
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if len(obj["vector"]) != obj["dim"]:
                raise ContractError(f"{path}:{n}: vector length does not match dim")
            ids.append(obj["id"])
            vectors.append(obj["vector"])
            model = obj["model"]
    if not ids:
        raise EmbeddingError(f"{path}: no embeddings")
    # stored rows are already unit norm; keep their float32 values bit-exact
    rows = np.asarray(vectors, dtype=np.float32)
    return EmbeddingMatrix(tuple(ids), rows, model)


def dump_binary(matrix: EmbeddingMatrix) -> bytes:
    """``CDEV1`` | u32 dim | u32 count | per record: u16 id length, id bytes, dim x f32 (LE)."""
    out = [BINARY_MAGIC, struct.pack("<II", matrix.dim, len(matrix))]
    rows = matrix.rows.astype("<f4")
    for rid, row in zip(matrix.ids, rows):
        raw = rid.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(row.tobytes())
    return b"".join(out)


def load_binary(data: bytes, model_tag: str = "unknown") -> EmbeddingMatrix:
    if data[:5] != BINARY_MAGIC:
        raise ContractError("not a CDEV1 embedding file")
    dim, count = struct.unpack_from("<II", data, 5)
    pos = 13
    ids, rows = [], np.empty((count, dim), dtype=np.float32)
    for k in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        ids.append(data[pos : pos + n].decode("utf-8"))
        pos += n
        rows[k] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
    if pos != len(data):
        raise ContractError("trailing bytes in CDEV1 file")
    return EmbeddingMatrix(tuple(ids), rows, model_tag)
