"""Cluster naming: representative selection, chat-completion prompt, TF-IDF fallback."""
from __future__ import annotations

import csv
import io
import logging
import math
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Literal, Sequence

import numpy as np

from .embedder import RetryPolicy, api_settings, post_with_retry
from .vecspace import unit_rows

logger = logging.getLogger(__name__)

INSTRUCTION = (
    "The following data elements belong to one group. "
    "Reply with a concise 2-6 word category name for the group and nothing else."
)
# no longer than INSTRUCTION, so a retried prompt still fits the same budget
STRICT_INSTRUCTION = (
    "Reply with ONLY a 2-6 word category name (no quotes, no explanation) for these data elements."
)
MAX_NAME_CHARS = 120
_TOKEN = re.compile(r"[a-z]+")
_QUOTES = "\"'`“”‘’"


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class LabelerParams:
    max_representatives: int = 20
    model_name: str = "gpt-3.5-turbo"
    context_tokens: int = 4096
    reserve_tokens: int = 512
    fallback_top_terms: int = 3

    def __post_init__(self):
        if self.max_representatives < 1:
            raise ValueError("max_representatives must be >= 1")
        if self.prompt_token_budget <= 0:
            raise ValueError("prompt token budget must be positive")

    @property
    def prompt_token_budget(self) -> int:
        return self.context_tokens - self.reserve_tokens


@dataclass(frozen=True)
class ClusterSummary:
    cluster_id: int
    name: str
    member_count: int
    representative_ids: tuple[str, ...]
    source: Literal["remote", "fallback"]


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    text = resources.files("harmonizer").joinpath("data/stopwords_en.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def select_representatives(matrix, labels, cluster_id: int, k: int) -> list[str]:
    """The ``k`` members closest (cosine) to the cluster centroid; ties by id."""
    lab = np.asarray(getattr(labels, "labels", labels))
    members = np.flatnonzero(lab == cluster_id)
    if cluster_id < 0 or len(members) == 0:
        raise KeyError(f"unknown cluster id {cluster_id}")
    unit = unit_rows(matrix.rows[members])
    centroid = unit.mean(axis=0)
    norm = np.linalg.norm(centroid)
    dist = 1.0 - unit @ (centroid / norm) if norm > 0 else np.zeros(len(members))
    ids = [matrix.ids[i] for i in members]
    order = sorted(range(len(members)), key=lambda m: (float(dist[m]), ids[m]))
    return [ids[m] for m in order[:k]]


def _record_line(record) -> str:
    parts = [p for p in (record.designation, record.definition) if p]
    return " — ".join(parts) if parts else record.composed_text


def build_label_prompt(representatives: Sequence, budget: int, instruction: str = INSTRUCTION) -> str:
    """Instruction line plus one line per representative, trimmed to ``budget`` tokens."""
    if not representatives:
        raise PromptError("no representatives")
    lines = [instruction]
    used = len(instruction)
    for record in representatives:
        line = " ".join(_record_line(record).split())
        if math.ceil((used + 1 + len(line)) / 4) > budget:
            break
        lines.append(line)
        used += 1 + len(line)
    if len(lines) < 2:
        raise PromptError(f"token budget {budget} cannot hold the instruction and one line")
    return "\n".join(lines)


def clean_name(text: str | None) -> str:
    if not text:
        return ""
    name = text.strip().strip(_QUOTES).strip()
    return " ".join(name.split())


def _valid(name: str) -> bool:
    return 0 < len(name) <= MAX_NAME_CHARS


class ChatClient:
    """OpenAI-compatible ``/v1/chat/completions`` client."""

    path = "/v1/chat/completions"

    def __init__(self, *, base_url: str | None = None, api_key: str | None = None, client=None,
                 retry: RetryPolicy | None = None, timeout: float = 60.0,
                 sleep: Callable[[float], None] = time.sleep):
        import httpx

        env_base, env_key = api_settings()
        self.base_url = (base_url or env_base).rstrip("/")
        self.api_key = api_key if api_key is not None else env_key
        self.client = client or httpx.Client(timeout=timeout)
        self.retry = retry or RetryPolicy(max_attempts=3)
        self.sleep = sleep

    def complete(self, model: str, prompt: str) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = post_with_retry(
            self.client,
            self.base_url + self.path,
            {"model": model, "messages": [{"role": "user", "content": prompt}]},
            headers,
            self.retry,
            self.sleep,
        )
        return body["choices"][0]["message"]["content"]


def label_cluster_remote(prompt: str, params: LabelerParams, client: ChatClient,
                         fallback: Callable[[], str]) -> tuple[str, str]:
    """Ask the chat service for a name; returns ``(name, source)``.

    An empty or over-long answer gets one retry with a stricter instruction.
    Any remaining failure uses ``fallback()`` and reports source ``"fallback"``.
    """
    attempts = [prompt, STRICT_INSTRUCTION + "\n" + prompt.split("\n", 1)[-1]]
    for text in attempts:
        try:
            name = clean_name(client.complete(params.model_name, text))
        except Exception as exc:  # noqa: BLE001 - labeling never aborts the pipeline
            logger.warning("remote labeling failed, using fallback: %s", exc)
            break
        if _valid(name):
            return name, "remote"
    return fallback(), "fallback"


def _tokens(text: str) -> list[str]:
    stop = stopwords()
    return [t for t in _TOKEN.findall(text.lower()) if t not in stop]


def label_cluster_fallback(representatives: Sequence, corpus, top: int = 3, cluster_id: int | None = None,
                           *, _df: Counter | None = None) -> str:
    """TF-IDF label: cluster text as the document, every corpus record as background."""
    if not representatives:
        raise PromptError("no representatives")
    counts = Counter()
    for r in representatives:
        counts.update(_tokens(r.composed_text))
    if not counts:
        return f"cluster-{cluster_id}"
    df = _df if _df is not None else document_frequencies(corpus)
    n_docs = len(corpus)
    total = sum(counts.values())
    scores = {
        term: (c / total) * (math.log((1 + n_docs) / (1 + df.get(term, 0))) + 1.0)
        for term, c in counts.items()
    }
    best = sorted(scores, key=lambda t: (-scores[t], t))[:top]
    return "/".join(t.title() for t in best)


def document_frequencies(corpus) -> Counter:
    df = Counter()
    for r in corpus:
        df.update(set(_tokens(r.composed_text)))
    return df


def label_clusters(matrix, assignment, corpus, params: LabelerParams = LabelerParams(),
                   client: ChatClient | None = None, max_in_flight: int = 4) -> list[ClusterSummary]:
    """One summary per cluster id, in cluster-id order. ``client=None`` labels offline."""
    records = corpus.by_id()
    df = document_frequencies(corpus)
    labels = np.asarray(assignment.labels)

    def one(cid: int) -> ClusterSummary:
        rep_ids = select_representatives(matrix, labels, cid, params.max_representatives)
        reps = [records[i] for i in rep_ids]

        def fallback():
            return label_cluster_fallback(reps, corpus, params.fallback_top_terms, cid, _df=df)

        if client is None:
            name, source = fallback(), "fallback"
        else:
            prompt = build_label_prompt(reps, params.prompt_token_budget)
            name, source = label_cluster_remote(prompt, params, client, fallback)
        return ClusterSummary(cid, name, int((labels == cid).sum()), tuple(rep_ids), source)

    ids = list(range(assignment.n_clusters))
    if client is None or max_in_flight <= 1:
        return [one(c) for c in ids]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, ids))


def dump_labels_csv(summaries: Sequence[ClusterSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cluster_id", "name", "member_count", "source"])
    for s in summaries:
        w.writerow([s.cluster_id, s.name, s.member_count, s.source])
    return buf.getvalue()


def read_labels_csv(text: str) -> dict[int, str]:
    return {int(row["cluster_id"]): row["name"] for row in csv.DictReader(io.StringIO(text))}
