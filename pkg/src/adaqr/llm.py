"""LLM query rewriting over an OpenAI-compatible HTTP API.

Covers prompt rendering, the chat and embedding clients, a per-key disk cache
of rewrites, and per-query cost accounting.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import httpx
import numpy as np

from .errors import (
    AuthError,
    CacheMissError,
    DataError,
    DimensionMismatchError,
    EmptyCompletionError,
    MissingRewriteError,
    RateLimitError,
    ServerError,
    ServiceError,
)
from .store import QueryRecord, as_embedding

log = logging.getLogger(__name__)

PROMPT_INSTRUCTIONS = (
    "Instructions:\n"
    "1. Identify the essential problem.\n"
    "2. Think step by step to reason and describe what information could be relevant "
    "and helpful to address the questions in detail.\n"
    "3. Draft an answer with as many thoughts as you have."
)

COST_UNITS = ("completion_tokens", "total_tokens", "fixed_per_call")


def render_prompt(query_text: str) -> str:
    if not query_text or not query_text.strip():
        raise DataError("cannot build a prompt for an empty query")
    return f"{query_text}\n\n{PROMPT_INSTRUCTIONS}"


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class LlmEndpointConfig:
    base_url: str
    model_name: str
    api_key_env_var: str = "OPENAI_API_KEY"
    timeout_seconds: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    backoff_seconds: float = 1.0

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("base_url must be non-empty")
        if not self.timeout_seconds > 0:
            raise ValueError("timeout_seconds must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class EmbeddingEndpointConfig:
    model_name: str
    base_url: str | None = None
    dim: int | None = None
    offline_store: str | None = None
    api_key_env_var: str = "OPENAI_API_KEY"
    timeout_seconds: float = 60.0
    max_retries: int = 3
    backoff_seconds: float = 1.0


@dataclass
class RewriteResult:
    query_id: str
    reasoned_text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: float = 0.0
    from_cache: bool = False
    retries: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RewriteResult":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# -- HTTP plumbing -----------------------------------------------------------


def _headers(api_key_env_var: str) -> dict:
    h = {"Content-Type": "application/json"}
    key = os.environ.get(api_key_env_var) if api_key_env_var else None
    if key:
        h["Authorization"] = f"Bearer {key}"
    return h


def _post_json(client: httpx.Client, url: str, payload: dict, headers: dict,
               max_retries: int, backoff: float) -> tuple[dict, int]:
    """POST with exponential backoff on 429, 5xx and transport errors.

    Returns the decoded body and the number of retries used.
    """
    attempt = 0
    while True:
        try:
            resp = client.post(url, json=payload, headers=headers)
        except httpx.TransportError as exc:
            err: ServiceError = ServiceError(f"network failure calling {url}: {exc}")
        else:
            status = resp.status_code
            if 200 <= status < 300:
                try:
                    return resp.json(), attempt
                except ValueError:
                    raise ServiceError(f"{url} returned a non-JSON body") from None
            if status in (401, 403):
                raise AuthError(f"{url} rejected credentials (HTTP {status})")
            if status == 429:
                err = RateLimitError(f"{url} rate limited (HTTP 429)")
            elif status >= 500:
                err = ServerError(f"{url} server error (HTTP {status})")
            else:
                raise ServiceError(f"{url} returned HTTP {status}: {resp.text[:200]}")
        if attempt >= max_retries:
            raise err
        delay = backoff * (2**attempt)
        log.warning("%s; retry %d/%d in %.2fs", err, attempt + 1, max_retries, delay)
        if delay > 0:
            time.sleep(delay)
        attempt += 1


# -- rewrite cache -----------------------------------------------------------


class RewriteCache:
    """One JSON file per (query id, model, prompt hash) key."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    @staticmethod
    def key(query_id: str, model_name: str, prompt_hash: str) -> str:
        return content_hash(json.dumps([query_id, model_name, prompt_hash]))

    def _lock(self, name):
        with self._guard:
            return self._locks.setdefault(name, threading.Lock())

    def get(self, query_id, model_name, prompt_hash) -> RewriteResult | None:
        name = self.key(query_id, model_name, prompt_hash)
        path = self.directory / name
        if not path.exists():
            return None
        try:
            res = RewriteResult.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (ValueError, TypeError, KeyError) as exc:
            log.warning("ignoring corrupt cache entry %s (%s)", path, exc)
            return None
        res.from_cache = True
        return res

    def put(self, query_id, model_name, prompt_hash, result: RewriteResult) -> None:
        name = self.key(query_id, model_name, prompt_hash)
        body = {**result.to_dict(), "from_cache": False}
        with self._lock(name):
            tmp = self.directory / f".{name}.tmp"
            tmp.write_text(json.dumps(body, sort_keys=True), encoding="utf-8")
            os.replace(tmp, self.directory / name)


def cache_get(cache: RewriteCache, key: tuple[str, str, str]) -> RewriteResult | None:
    return cache.get(*key)


def cache_put(cache: RewriteCache, key: tuple[str, str, str], result: RewriteResult) -> None:
    cache.put(*key, result)


# -- chat rewriting ----------------------------------------------------------


class LlmReasoner:
    def __init__(self, config: LlmEndpointConfig, cache: RewriteCache | None = None,
                 client: httpx.Client | None = None):
        self.config = config
        self.cache = cache
        self._client = client or httpx.Client(timeout=config.timeout_seconds)

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def rewrite(self, query: QueryRecord) -> RewriteResult:
        cfg = self.config
        prompt = render_prompt(query.text)
        phash = content_hash(prompt)
        if self.cache is not None:
            hit = self.cache.get(query.id, cfg.model_name, phash)
            if hit is not None:
                return hit
        payload = {
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
        }
        t0 = time.perf_counter()
        body, retries = _post_json(
            self._client,
            cfg.base_url.rstrip("/") + "/chat/completions",
            payload,
            _headers(cfg.api_key_env_var),
            cfg.max_retries,
            cfg.backoff_seconds,
        )
        latency = (time.perf_counter() - t0) * 1000.0
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ServiceError("chat response lacks choices[0].message.content") from None
        if not isinstance(text, str) or not text.strip():
            raise EmptyCompletionError(f"empty completion for query {query.id!r}")
        usage = body.get("usage") or {}
        result = RewriteResult(
            query.id,
            text,
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
            latency,
            False,
            retries,
        )
        if self.cache is not None:
            self.cache.put(query.id, cfg.model_name, phash, result)
        return result

    def rewrite_many(self, queries: Sequence[QueryRecord], max_in_flight: int = 4) -> list[RewriteResult]:
        if max_in_flight <= 1:
            return [self.rewrite(q) for q in queries]
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            return list(pool.map(self.rewrite, queries))


def rewrite_query(query: QueryRecord, config: LlmEndpointConfig,
                  cache: RewriteCache | None = None) -> RewriteResult:
    with LlmReasoner(config, cache) as r:
        return r.rewrite(query)


# -- embeddings --------------------------------------------------------------


class OfflineEmbeddingStore:
    """Precomputed embeddings keyed by content hash, one JSON object per line."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        self.entries = dict(entries or {})

    @classmethod
    def load(cls, path) -> "OfflineEmbeddingStore":
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    entries[obj["hash"]] = as_embedding(obj["embedding"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{line_no}: bad embedding entry ({exc})") from None
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for h in sorted(self.entries):
                fh.write(json.dumps({"hash": h, "embedding": [float(v) for v in self.entries[h]]}) + "\n")

    def add(self, text: str, embedding) -> str:
        h = content_hash(text)
        self.entries[h] = as_embedding(embedding)
        return h

    def lookup(self, text: str) -> np.ndarray:
        h = content_hash(text)
        if h not in self.entries:
            raise CacheMissError(h)
        return self.entries[h]


class EmbeddingClient:
    def __init__(self, config: EmbeddingEndpointConfig, client: httpx.Client | None = None):
        self.config = config
        self.store = OfflineEmbeddingStore.load(config.offline_store) if config.offline_store else None
        self._client = None
        if config.base_url:
            self._client = client or httpx.Client(timeout=config.timeout_seconds)

    def close(self):
        if self._client is not None:
            self._client.close()

    def embed(self, text: str) -> np.ndarray:
        cfg = self.config
        if self._client is None:
            if self.store is None:
                raise ServiceError("no embedding endpoint or offline store configured")
            vec = self.store.lookup(text)
        else:
            body, _ = _post_json(
                self._client,
                cfg.base_url.rstrip("/") + "/embeddings",
                {"model": cfg.model_name, "input": text},
                _headers(cfg.api_key_env_var),
                cfg.max_retries,
                cfg.backoff_seconds,
            )
            try:
                vec = as_embedding(body["data"][0]["embedding"])
            except (KeyError, IndexError, TypeError):
                raise ServiceError("embedding response lacks data[0].embedding") from None
        if cfg.dim is not None and vec.size != cfg.dim:
            raise DimensionMismatchError(f"embedding dim {vec.size} != pipeline dim {cfg.dim}")
        return vec


def embed_text(text: str, embed_config: EmbeddingEndpointConfig) -> np.ndarray:
    c = EmbeddingClient(embed_config)
    try:
        return c.embed(text)
    finally:
        c.close()


# -- cost accounting ---------------------------------------------------------


@dataclass
class CostLedger:
    per_query: dict[str, float]
    total: float
    unit: str
    baseline_total: float | None = None
    llm_routed: int = 0
    num_queries: int = 0
    paths: dict[str, str] = field(default_factory=dict)

    @property
    def savings(self) -> float | None:
        """Fractional saving against sending every query to the LLM."""
        if self.baseline_total is None:
            return None
        if self.baseline_total == 0:
            return 0.0
        return 1.0 - self.total / self.baseline_total

    @property
    def llm_fraction(self) -> float:
        return self.llm_routed / self.num_queries if self.num_queries else 0.0

    def to_dict(self) -> dict:
        return {
            "unit": self.unit,
            "total": self.total,
            "baseline_total": self.baseline_total,
            "savings": self.savings,
            "num_queries": self.num_queries,
            "llm_routed": self.llm_routed,
            "per_query": [
                {"id": q, "path": self.paths.get(q), "cost": c} for q, c in self.per_query.items()
            ],
        }


def call_cost(result: RewriteResult, unit: str) -> float:
    if unit == "completion_tokens":
        return float(result.completion_tokens)
    if unit == "total_tokens":
        return float(result.prompt_tokens + result.completion_tokens)
    if unit == "fixed_per_call":
        return 1.0
    raise ValueError(f"unknown cost unit {unit!r}")


def accumulate_cost(decisions, rewrites: Mapping[str, RewriteResult],
                    unit: str = "completion_tokens") -> CostLedger:
    """Dense-routed queries cost 0; the baseline prices every query on the LLM path.

    The baseline is left unset when a dense-routed query has no rewrite to
    price and the unit depends on token counts.
    """
    if unit not in COST_UNITS:
        raise ValueError(f"unknown cost unit {unit!r}")
    per_query: dict[str, float] = {}
    paths = {}
    baseline: float | None = 0.0
    llm_routed = 0
    for d in decisions:
        paths[d.query_id] = d.path
        r = rewrites.get(d.query_id)
        if d.path == "llm":
            if r is None:
                raise MissingRewriteError(d.query_id, "LLM-routed query has no rewrite result to price")
            per_query[d.query_id] = call_cost(r, unit)
            llm_routed += 1
        else:
            per_query[d.query_id] = 0.0
        if baseline is not None:
            if r is not None:
                baseline += call_cost(r, unit)
            elif unit == "fixed_per_call":
                baseline += 1.0
            else:
                baseline = None
    total = float(sum(per_query.values()))
    return CostLedger(per_query, total, unit, baseline, llm_routed, len(per_query), paths)
