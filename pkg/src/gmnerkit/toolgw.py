"""Multimodal search gateway: deterministic local index, similarity cache, HTTP service.

Caching rule: a lookup whose query has sequence similarity strictly greater
than the threshold (default 0.9) to a cached key of the same modality is
served from the cache; equal-to-threshold is a miss. Similarity is the
normalized longest-common-subsequence ratio

    sim(a, b) = 2 * |LCS(a', b')| / (|a'| + |b'|)

over lowercased, whitespace-collapsed strings a', b' (both empty -> 1.0).
This definition is frozen: sim is symmetric and equals 1.0 iff the
normalized strings are identical.

Concurrent identical misses are deduplicated (single-flight): one backend
call serves every waiter. The cache persists as append-only JSONL.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import requests

from .protocol import MalformedPayload, SearchQuerySet, parse_search_payload

logger = logging.getLogger(__name__)

DEFAULT_K = 3
DEFAULT_CACHE_THRESHOLD = 0.9
MODALITIES = ("text", "image")


class ToolUnavailable(RuntimeError):
    """A search tool cannot serve the request."""


class BackendUnavailable(ToolUnavailable):
    """The underlying search engine failed."""


class SummarizerUnavailable(ToolUnavailable):
    """The summarizer hook failed; results degrade to raw snippets."""


class BindFailure(OSError):
    """The gateway could not bind its address."""


def normalize_query(q: str) -> str:
    return " ".join(q.lower().split())


def _lcs_length(a: str, b: str) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for ca in a:
        cur = [0]
        for j, cb in enumerate(b, start=1):
            if ca == cb:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[len(b)]


def similarity(a: str, b: str) -> float:
    """Normalized LCS ratio in [0, 1] over normalized queries; symmetric."""
    na, nb = normalize_query(a), normalize_query(b)
    total = len(na) + len(nb)
    if total == 0:
        return 1.0
    return 2.0 * _lcs_length(na, nb) / total


@dataclass(frozen=True)
class SearchResult:
    title: str
    summary: str
    url: str
    image_ref: str | None = None
    degraded: bool = False

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "summary": self.summary,
            "url": self.url,
            "image_ref": self.image_ref,
            "degraded": self.degraded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchResult":
        return cls(
            title=d["title"],
            summary=d["summary"],
            url=d["url"],
            image_ref=d.get("image_ref"),
            degraded=bool(d.get("degraded", False)),
        )


@dataclass(frozen=True)
class CacheEntry:
    key_query: str
    modality: str
    results: tuple[SearchResult, ...]
    created_at: float

    def to_dict(self) -> dict:
        return {
            "key_query": self.key_query,
            "modality": self.modality,
            "results": [r.to_dict() for r in self.results],
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CacheEntry":
        return cls(
            key_query=d["key_query"],
            modality=d["modality"],
            results=tuple(SearchResult.from_dict(r) for r in d["results"]),
            created_at=float(d["created_at"]),
        )


class SearchEngine(Protocol):
    def search(self, query: str, modality: str, k: int) -> list[SearchResult]: ...


class LocalIndexBackend:
    """Deterministic reference engine over a JSONL corpus.

    Docs: {"modality": "text"|"image", "title", "body", "url", "image_ref"?}.
    Ranking: count of query tokens present in the doc's title+body token set,
    ties broken by corpus order; zero-overlap docs are never returned.
    """

    def __init__(self, docs: Iterable[dict]):
        self._docs: list[dict] = []
        for doc in docs:
            if doc.get("modality") not in MODALITIES:
                raise ValueError(f"doc modality must be one of {MODALITIES}: {doc!r}")
            self._docs.append(doc)

    @classmethod
    def from_file(cls, path: str | Path) -> "LocalIndexBackend":
        with Path(path).open(encoding="utf-8") as f:
            return cls(json.loads(line) for line in f if line.strip())

    def search(self, query: str, modality: str, k: int) -> list[SearchResult]:
        q_tokens = set(normalize_query(query).split())
        scored = []
        for i, doc in enumerate(self._docs):
            if doc["modality"] != modality:
                continue
            doc_tokens = set(normalize_query(f"{doc.get('title', '')} {doc.get('body', '')}").split())
            overlap = len(q_tokens & doc_tokens)
            if overlap > 0:
                scored.append((-overlap, i, doc))
        scored.sort()
        return [
            SearchResult(
                title=doc.get("title", ""),
                summary=doc.get("body", ""),
                url=doc.get("url", ""),
                image_ref=doc.get("image_ref"),
            )
            for _, _, doc in scored[:k]
        ]


_ENGINE_FACTORIES: dict[str, Callable[[str], SearchEngine]] = {}


def register_engine(name: str, factory: Callable[[str], SearchEngine]) -> None:
    """Register an external-engine adapter usable as '<name>:<argument>'."""
    _ENGINE_FACTORIES[name] = factory


def make_backend(spec: str) -> SearchEngine:
    kind, sep, arg = spec.partition(":")
    if not sep:
        raise ValueError(f"backend spec {spec!r} must look like kind:argument")
    if kind == "local":
        return LocalIndexBackend.from_file(arg)
    if kind in _ENGINE_FACTORIES:
        return _ENGINE_FACTORIES[kind](arg)
    raise ValueError(f"unknown search backend {kind!r}")


Summarizer = Callable[[str, SearchResult], str]


class RemoteSummarizer:
    """HTTP summarizer hook: POST {"query","title","body"} -> {"summary"}."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def __call__(self, query: str, result: SearchResult) -> str:
        try:
            resp = requests.post(
                self.endpoint,
                json={"query": query, "title": result.title, "body": result.summary},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            summary = resp.json()["summary"]
        except (requests.RequestException, ValueError, KeyError) as exc:
            raise SummarizerUnavailable(f"summarizer at {self.endpoint} failed: {exc}") from exc
        if not isinstance(summary, str) or not summary:
            raise SummarizerUnavailable("summarizer returned an empty summary")
        return summary


class _Flight:
    __slots__ = ("done", "results", "error")

    def __init__(self) -> None:
        self.done = threading.Event()
        self.results: tuple[SearchResult, ...] | None = None
        self.error: BaseException | None = None


class CachingSearchTool:
    """Search with per-modality similarity caching and single-flight misses."""

    def __init__(
        self,
        backend: SearchEngine,
        k_results: int = DEFAULT_K,
        threshold: float = DEFAULT_CACHE_THRESHOLD,
        cache_path: str | Path | None = None,
        summarizer: Summarizer | None = None,
    ):
        if k_results < 1:
            raise ValueError("k_results must be >= 1")
        self.backend = backend
        self.k_results = k_results
        self.threshold = threshold
        self.summarizer = summarizer
        self._cache_path = Path(cache_path) if cache_path is not None else None
        self._entries: list[CacheEntry] = []
        self._lock = threading.Lock()
        self._flights: dict[tuple[str, str], _Flight] = {}
        if self._cache_path is not None and self._cache_path.exists():
            with self._cache_path.open(encoding="utf-8") as f:
                self._entries = [
                    CacheEntry.from_dict(json.loads(line)) for line in f if line.strip()
                ]

    def _lookup(self, query: str, modality: str) -> tuple[SearchResult, ...] | None:
        # Best-similarity entry of the same modality, strictly above threshold;
        # ties go to the oldest entry. Caller holds the lock.
        best: tuple[float, int] | None = None
        for i, entry in enumerate(self._entries):
            if entry.modality != modality:
                continue
            sim = similarity(query, entry.key_query)
            if sim > self.threshold and (best is None or sim > best[0]):
                best = (sim, i)
        if best is None:
            return None
        return self._entries[best[1]].results

    def _store(self, entry: CacheEntry) -> None:
        # Caller holds the lock. Entries are immutable once written.
        self._entries.append(entry)
        if self._cache_path is not None:
            with self._cache_path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(entry.to_dict(), separators=(",", ":")) + "\n")

    def _summarize(self, query: str, results: list[SearchResult]) -> list[SearchResult]:
        if self.summarizer is None:
            return results
        out = []
        for r in results:
            try:
                out.append(
                    SearchResult(
                        title=r.title,
                        summary=self.summarizer(query, r),
                        url=r.url,
                        image_ref=r.image_ref,
                    )
                )
            except SummarizerUnavailable as exc:
                logger.warning("summarizer degraded for %r: %s", query, exc)
                out.append(
                    SearchResult(
                        title=r.title,
                        summary=r.summary,
                        url=r.url,
                        image_ref=r.image_ref,
                        degraded=True,
                    )
                )
        return out

    def search(self, query: str, modality: str) -> list[SearchResult]:
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if not query.strip():
            raise ValueError("query must be non-empty")
        key = (modality, normalize_query(query))

        with self._lock:
            cached = self._lookup(query, modality)
            if cached is not None:
                return list(cached[: self.k_results])
            flight = self._flights.get(key)
            if flight is None:
                flight = _Flight()
                self._flights[key] = flight
                leader = True
            else:
                leader = False

        if not leader:
            flight.done.wait()
            if flight.error is not None:
                raise flight.error
            assert flight.results is not None
            return list(flight.results)

        try:
            try:
                raw = self.backend.search(query, modality, self.k_results)
            except ToolUnavailable:
                raise
            except Exception as exc:
                raise BackendUnavailable(f"backend failed for {query!r}: {exc}") from exc
            results = raw[: self.k_results]
            if modality == "text":
                results = self._summarize(query, results)
            entry = CacheEntry(
                key_query=query,
                modality=modality,
                results=tuple(results),
                created_at=time.time(),
            )
            with self._lock:
                self._store(entry)
            flight.results = entry.results
            return list(entry.results)
        except BaseException as exc:
            flight.error = exc
            raise
        finally:
            with self._lock:
                self._flights.pop(key, None)
            flight.done.set()

    def search_batch(self, queries: SearchQuerySet) -> list[list[SearchResult]]:
        return [self.search(entry.q, queries.modality) for entry in queries.entries]


class HttpToolClient:
    """Client for a running gateway; satisfies the rollout tool interface."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def search_batch(self, queries: SearchQuerySet) -> list[list[SearchResult]]:
        payload = {"queries": [{"entity": e.entity, "q": e.q} for e in queries.entries]}
        url = f"{self.base_url}/{queries.modality}_search"
        try:
            resp = requests.post(url, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ToolUnavailable(f"gateway unreachable at {url}: {exc}") from exc
        if resp.status_code != 200:
            raise ToolUnavailable(f"gateway returned HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        return [
            [SearchResult.from_dict(hit) for hit in item["hits"]]
            for item in body["results"]
        ]


def _make_handler(tool: CachingSearchTool) -> type[BaseHTTPRequestHandler]:
    class GatewayHandler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args) -> None:
            logger.info("%s %s", self.address_string(), fmt % args)

        def _send(self, status: int, doc: dict) -> None:
            body = json.dumps(doc).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self) -> None:  # noqa: N802 (http.server API)
            route = {"/text_search": "text", "/image_search": "image"}.get(self.path)
            if route is None:
                self._send(404, {"error": {"kind": "not_found", "message": self.path}})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                doc = json.loads(self.rfile.read(length).decode("utf-8"))
                queries = parse_search_payload(doc, route)
            except (ValueError, MalformedPayload) as exc:
                self._send(400, {"error": {"kind": "malformed", "message": str(exc)}})
                return
            try:
                per_query = tool.search_batch(queries)
            except ToolUnavailable as exc:
                self._send(503, {"error": {"kind": "backend_unavailable", "message": str(exc)}})
                return
            self._send(
                200,
                {
                    "results": [
                        {
                            "entity": entry.entity,
                            "q": entry.q,
                            "hits": [r.to_dict() for r in hits],
                        }
                        for entry, hits in zip(queries.entries, per_query)
                    ]
                },
            )

    return GatewayHandler


@dataclass
class GatewayServer:
    server: ThreadingHTTPServer
    thread: threading.Thread | None = field(default=None)

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[0], self.server.server_address[1]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def serve_forever(self) -> None:
        self.server.serve_forever()

    def start_background(self) -> "GatewayServer":
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        return self

    def shutdown(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self.thread is not None:
            self.thread.join(timeout=5)


def serve(bind_address: tuple[str, int], tool: CachingSearchTool) -> GatewayServer:
    """Bind the gateway; call serve_forever() or start_background() on the result."""
    try:
        server = ThreadingHTTPServer(bind_address, _make_handler(tool))
    except OSError as exc:
        raise BindFailure(f"cannot bind {bind_address}: {exc}") from exc
    logger.info("search gateway listening on %s:%s", *server.server_address[:2])
    return GatewayServer(server=server)
