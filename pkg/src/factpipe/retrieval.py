"""Web-search evidence gathering, consolidation, caching, and cost accounting.

Every sentence (integrated pipeline) or claim (staged baseline) becomes one
search query returning up to ten snippets. Snippets from all of a response's
queries are concatenated, in query order then rank order, into a single
consolidated evidence context. All traffic goes through an append-only JSONL
cache so offline runs replay recorded results byte-identically.
"""
from __future__ import annotations

import json
import os
import re
import threading
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Optional, Sequence

import requests

from .errors import (
    ContractViolation,
    EmptyBundle,
    EmptyQuerySet,
    NetworkError,
    OfflineCacheMiss,
    QuotaExceeded,
    RetrievalError,
)
from .segmenter import Sentence

MAX_RESULTS_PER_QUERY = 10
DEFAULT_UNIT_PRICE_PER_1000 = Decimal("0.75")
DEFAULT_EVIDENCE_TOKEN_BUDGET = 6000
SEARCH_KEY_ENV = "FACTPIPE_SEARCH_KEY"

_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class SearchSnippet:
    title: str
    url: str
    snippet_text: str
    rank: int

    def __post_init__(self):
        if not (1 <= self.rank <= MAX_RESULTS_PER_QUERY):
            raise ContractViolation(f"snippet rank {self.rank} outside 1..{MAX_RESULTS_PER_QUERY}")
        if not self.url:
            raise ContractViolation("snippet url must be non-empty")


@dataclass
class EvidenceBundle:
    """Per-query snippet lists for one response, in query order."""

    entries: list[tuple[str, list[SearchSnippet]]]
    granularity: str  # "sentence" or "claim"

    def __post_init__(self):
        if self.granularity not in ("sentence", "claim"):
            raise ContractViolation(f"unknown granularity {self.granularity!r}")
        for query, snippets in self.entries:
            if len(snippets) > MAX_RESULTS_PER_QUERY:
                raise ContractViolation(f"query {query!r} has more than 10 snippets")

    def all_urls(self) -> set[str]:
        return {s.url for _q, snippets in self.entries for s in snippets}


@dataclass
class EvidenceContext:
    """The consolidated, formatted evidence block a verifier reads."""

    text: str
    snippet_count: int
    source_urls: set[str]
    token_estimate: int
    provenance: dict[str, tuple[str, int]] = field(default_factory=dict)  # url -> (query, rank)


@dataclass
class CostReport:
    """Search-API spend: exact decimal arithmetic, never floats."""

    query_count: int
    unit_price_usd_per_1000: Decimal = DEFAULT_UNIT_PRICE_PER_1000
    total_usd: Decimal = field(init=False)

    def __post_init__(self):
        self.total_usd = (
            Decimal(self.query_count) * self.unit_price_usd_per_1000 / Decimal(1000)
        )

    def __add__(self, other: "CostReport") -> "CostReport":
        if self.unit_price_usd_per_1000 != other.unit_price_usd_per_1000:
            raise ContractViolation("cannot sum cost reports with different unit prices")
        return CostReport(
            query_count=self.query_count + other.query_count,
            unit_price_usd_per_1000=self.unit_price_usd_per_1000,
        )


def query_cost(query_count: int, unit_price: Decimal = DEFAULT_UNIT_PRICE_PER_1000) -> CostReport:
    return CostReport(query_count=query_count, unit_price_usd_per_1000=unit_price)


def normalize_query(query: str) -> str:
    """Cache key normalization: NFC, collapse whitespace, strip trailing
    punctuation."""
    q = unicodedata.normalize("NFC", query)
    q = _WS.sub(" ", q).strip()
    return q.rstrip(".!?,;:").rstrip()


class SearchCache:
    """Append-only JSONL store of search results, keyed by normalized query.

    One record per fetch: {"query", "ts", "results": [...]}. On load, the
    last record for a key wins, so re-fetching a query refreshes it. Reads
    are lock-free after load; appends are serialized.
    """

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._store: dict[str, list[SearchSnippet]] = {}
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._store[rec["query"]] = _snippets_from_json(rec["results"])

    def __len__(self) -> int:
        return len(self._store)

    def get(self, normalized_query: str) -> Optional[list[SearchSnippet]]:
        hit = self._store.get(normalized_query)
        return list(hit) if hit is not None else None

    def put(self, normalized_query: str, snippets: list[SearchSnippet]) -> None:
        with self._lock:
            self._store[normalized_query] = list(snippets)
            if self.path:
                rec = {
                    "query": normalized_query,
                    "ts": time.time(),
                    "results": [
                        {"title": s.title, "url": s.url, "snippet": s.snippet_text, "rank": s.rank}
                        for s in snippets
                    ],
                }
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    def freeze(self, out_path: str | Path) -> int:
        """Write one canonical record per query (sorted, ts zeroed) for
        reproducible replay fixtures."""
        with open(out_path, "w", encoding="utf-8") as fh:
            for query in sorted(self._store):
                rec = {
                    "query": query,
                    "ts": 0,
                    "results": [
                        {"title": s.title, "url": s.url, "snippet": s.snippet_text, "rank": s.rank}
                        for s in self._store[query]
                    ],
                }
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
        return len(self._store)

    def stats(self) -> dict:
        n_snippets = sum(len(v) for v in self._store.values())
        return {
            "queries": len(self._store),
            "snippets": n_snippets,
            "empty_results": sum(1 for v in self._store.values() if not v),
        }


def _snippets_from_json(results: list[dict]) -> list[SearchSnippet]:
    return [
        SearchSnippet(
            title=r.get("title", ""),
            url=r["url"],
            snippet_text=r.get("snippet", "") or "",
            rank=r["rank"],
        )
        for r in results
    ]


class SearchClient:
    """SERPER-compatible search client with replay cache and cost counters.

    Offline (no API key, or ``offline=True``) every query must be in the
    cache; a miss raises OfflineCacheMiss. Live fetches retry transient
    failures up to ``max_attempts`` with exponential backoff, then append
    the parsed results to the cache.
    """

    def __init__(
        self,
        cache_path: Optional[str | Path] = None,
        api_key: Optional[str] = None,
        base_url: str = "https://google.serper.dev",
        offline: Optional[bool] = None,
        max_parallel: int = 8,
        timeout: float = 30.0,
        max_attempts: int = 3,
        backoff_s: float = 0.5,
        unit_price: Decimal = DEFAULT_UNIT_PRICE_PER_1000,
        session: Optional[requests.Session] = None,
    ):
        self.cache = SearchCache(cache_path)
        self.api_key = api_key if api_key is not None else os.environ.get(SEARCH_KEY_ENV)
        self.base_url = base_url.rstrip("/")
        self.offline = offline if offline is not None else self.api_key is None
        self.max_parallel = max_parallel
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.unit_price = unit_price
        self._session = session or requests.Session()
        self._lock = threading.Lock()
        self._inflight: dict[str, threading.Lock] = {}
        self._unique_queries: set[str] = set()
        self.lookups = 0
        self.cache_hits = 0
        self.network_calls = 0

    # --- counters ---------------------------------------------------------

    @property
    def query_count(self) -> int:
        """Distinct billable queries this session (duplicates are free)."""
        return len(self._unique_queries)

    def reset_counters(self) -> None:
        with self._lock:
            self._unique_queries.clear()
            self.lookups = 0
            self.cache_hits = 0
            self.network_calls = 0

    def cost_report(self) -> CostReport:
        return CostReport(query_count=self.query_count, unit_price_usd_per_1000=self.unit_price)

    # --- search -----------------------------------------------------------

    def search(self, query: str) -> list[SearchSnippet]:
        """Top results for one query, at most ten, in engine rank order."""
        normalized = normalize_query(query)
        if not normalized:
            raise ContractViolation("query is empty after normalization")
        with self._lock:
            self.lookups += 1
            self._unique_queries.add(normalized)
            # Per-query lock so concurrent duplicates fetch only once.
            query_lock = self._inflight.setdefault(normalized, threading.Lock())
        with query_lock:
            cached = self.cache.get(normalized)
            if cached is not None:
                with self._lock:
                    self.cache_hits += 1
                return cached
            if self.offline:
                raise OfflineCacheMiss(f"offline mode and no cached results for {normalized!r}")
            snippets = self._fetch(normalized)
            self.cache.put(normalized, snippets)
            return list(snippets)

    def _fetch(self, normalized_query: str) -> list[SearchSnippet]:
        body = {"q": normalized_query, "num": MAX_RESULTS_PER_QUERY}
        headers = {"X-API-KEY": self.api_key or "", "Content-Type": "application/json"}
        last_error: Optional[Exception] = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
            try:
                with self._lock:
                    self.network_calls += 1
                resp = self._session.post(
                    f"{self.base_url}/search", json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as e:
                last_error = e
                continue
            if resp.status_code in (402, 429):
                raise QuotaExceeded(f"search API returned {resp.status_code}")
            if resp.status_code >= 500:
                last_error = NetworkError(f"search API returned {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise NetworkError(f"search API returned {resp.status_code}: {resp.text[:200]}")
            organic = resp.json().get("organic", [])
            return [
                SearchSnippet(
                    title=r.get("title", ""),
                    url=r.get("link", ""),
                    snippet_text=r.get("snippet", "") or "",
                    rank=i,
                )
                for i, r in enumerate(organic[:MAX_RESULTS_PER_QUERY], start=1)
            ]
        raise NetworkError(f"search failed after {self.max_attempts} attempts: {last_error}")

    # --- bundle retrieval ---------------------------------------------------

    def retrieve_sentence_evidence(self, sentences: Sequence[Sentence]) -> EvidenceBundle:
        """One entry per sentence, in sentence order; duplicate sentences cost
        one query via the cache but keep their own entries."""
        if not sentences:
            raise EmptyQuerySet("no sentences to retrieve evidence for")
        queries = [s.text for s in sentences]
        return EvidenceBundle(
            entries=list(zip(queries, self._search_many(queries))), granularity="sentence"
        )

    def retrieve_claim_evidence(self, claims: Sequence[str]) -> EvidenceBundle:
        """One entry per claim, in claim order."""
        if not claims:
            raise EmptyQuerySet("no claims to retrieve evidence for")
        return EvidenceBundle(
            entries=list(zip(list(claims), self._search_many(list(claims)))), granularity="claim"
        )

    def _search_many(self, queries: list[str]) -> list[list[SearchSnippet]]:
        def one(pair):
            i, q = pair
            try:
                return self.search(q)
            except Exception as e:  # annotate with position, keep the cause
                raise RetrievalError(index=i, query=q, cause=e) from e

        if len(queries) == 1 or self.max_parallel <= 1:
            return [one(p) for p in enumerate(queries)]
        with ThreadPoolExecutor(max_workers=self.max_parallel) as pool:
            return list(pool.map(one, enumerate(queries)))


# --- consolidation ----------------------------------------------------------


def consolidate(
    bundle: EvidenceBundle, token_budget: int = DEFAULT_EVIDENCE_TOKEN_BUDGET
) -> EvidenceContext:
    """Concatenate snippets (entry order, then rank order) into one context.

    Exact duplicates (same url and snippet text) keep their first occurrence
    only. When the whitespace-token budget would be exceeded, whole snippets
    are dropped from the tail so provenance stays coherent.
    """
    if not bundle.entries:
        raise EmptyBundle("cannot consolidate an empty bundle")
    lines: list[str] = []
    source_urls: set[str] = set()
    provenance: dict[str, tuple[str, int]] = {}
    seen: set[tuple[str, str]] = set()
    used_tokens = 0
    truncated = False
    for query, snippets in bundle.entries:
        if truncated:
            break
        for s in snippets:
            key = (s.url, s.snippet_text)
            if key in seen:
                continue
            seen.add(key)
            line = f"- {s.title}: {s.snippet_text} ({s.url})"
            line_tokens = len(line.split())
            if used_tokens + line_tokens > token_budget:
                truncated = True
                break
            used_tokens += line_tokens
            lines.append(line)
            if s.url not in provenance:
                provenance[s.url] = (query, s.rank)
                source_urls.add(s.url)
    text = "\n".join(lines)
    return EvidenceContext(
        text=text,
        snippet_count=len(lines),
        source_urls=source_urls,
        token_estimate=len(text.split()),
        provenance=provenance,
    )


def url_overlap(
    claim_bundle: EvidenceBundle, sentence_bundle: EvidenceBundle
) -> tuple[float, float]:
    """Exact-URL agreement between claim-level and sentence-level evidence.

    Returns (shared fraction of claim-side URLs, fraction of claim entries
    with at least one URL present in the sentence-side union).
    """
    if claim_bundle.granularity != "claim" or sentence_bundle.granularity != "sentence":
        raise ContractViolation("url_overlap takes (claim bundle, sentence bundle)")
    if not claim_bundle.entries or not sentence_bundle.entries:
        raise EmptyBundle("url_overlap needs non-empty bundles")
    claim_urls = claim_bundle.all_urls()
    sentence_urls = sentence_bundle.all_urls()
    url_fraction = len(claim_urls & sentence_urls) / len(claim_urls) if claim_urls else 0.0
    entries_with_hit = sum(
        1
        for _q, snippets in claim_bundle.entries
        if any(s.url in sentence_urls for s in snippets)
    )
    entry_fraction = entries_with_hit / len(claim_bundle.entries)
    return url_fraction, entry_fraction
