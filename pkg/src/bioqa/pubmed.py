"""NCBI eUtils client: relevance-sorted esearch with a date cutoff, efetch for titles.

Transports return the raw response text of one eUtils GET, so the same
parsing code runs against the live service, a recorded cassette, and the
synthetic fixture transport used in tests.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence
from xml.sax.saxutils import escape

import httpx

from .core import atomic_write_text, dump_json, is_pmid
from .errors import (
    ConfigError,
    AuthError,
    IoError,
    ParseError,
    PreconditionError,
    QuerySyntaxRejected,
    RequestRejected,
    ScriptMiss,
    TransientError,
)
from .retry import Backoff, call_with_retry

log = logging.getLogger(__name__)

EFETCH_BATCH = 200


@dataclass(frozen=True)
class SearchRequest:
    query: str
    max_date: dt.date
    limit: int = 50

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise PreconditionError("search query must be nonempty")
        if self.limit < 1:
            raise PreconditionError("search limit must be >= 1")


@dataclass(frozen=True)
class Article:
    pmid: str
    title: str
    abstract: str | None = None

    def __post_init__(self) -> None:
        if not is_pmid(self.pmid):
            raise ValueError(f"bad PMID {self.pmid!r}")
        if not self.title:
            raise ValueError(f"article {self.pmid} has an empty title")


@dataclass(frozen=True)
class MissingArticle:
    """Placeholder for a requested PMID that efetch did not return."""

    pmid: str


class RateLimiter:
    """Token bucket; ``acquire`` blocks until a request may leave.

    ``burst=1`` (the default) spaces requests at least ``1/rate`` seconds apart.
    """

    def __init__(
        self,
        rate: float,
        burst: int = 1,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.burst = burst
        self.clock = clock
        self.sleep = sleep
        self._tokens = float(burst)
        self._stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self.clock()
                self._tokens = min(self.burst, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                # tolerance keeps float residue from looping on sub-ulp sleeps
                if self._tokens >= 1.0 - 1e-9:
                    self._tokens = max(0.0, self._tokens - 1.0)
                    return
                self.sleep((1.0 - self._tokens) / self.rate)


class Transport(Protocol):
    def get(self, endpoint: str, params: Mapping[str, str]) -> str: ...


class HttpTransport:
    def __init__(
        self,
        base_url: str = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils",
        api_key: str | None = None,
        rate_limiter: RateLimiter | None = None,
        retry_max: int = 5,
        backoff: Backoff | None = None,
        timeout: float = 30.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.api_key = api_key
        # NCBI allows 10 req/s with a key, 3 without
        self.limiter = rate_limiter or RateLimiter(10.0 if api_key else 3.0)
        self.retry_max = retry_max
        self.backoff = backoff or Backoff()
        self.sleep = sleep
        self._client = httpx.Client(base_url=base_url.rstrip("/") + "/", timeout=timeout, transport=transport)

    def _redact(self, exc: Exception) -> str:
        text = str(exc)
        return text.replace(self.api_key, "***") if self.api_key else text

    def _once(self, endpoint: str, params: Mapping[str, str]) -> str:
        self.limiter.acquire()
        try:
            resp = self._client.get(endpoint, params=params)
        except httpx.TimeoutException as exc:
            raise TransientError(f"timeout: {self._redact(exc)}") from None
        except httpx.TransportError as exc:
            raise TransientError(f"connection failed: {self._redact(exc)}") from None
        if resp.status_code in (401, 403):
            raise AuthError(f"eUtils HTTP {resp.status_code}")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"eUtils HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise RequestRejected(f"eUtils HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.text

    def get(self, endpoint: str, params: Mapping[str, str]) -> str:
        params = dict(params)
        if self.api_key:
            params["api_key"] = self.api_key
        text, _ = call_with_retry(
            lambda: self._once(endpoint, params), self.retry_max, self.backoff, self.sleep, what=endpoint
        )
        return text


def _cassette_key(endpoint: str, params: Mapping[str, str]) -> str:
    clean = {k: v for k, v in params.items() if k != "api_key"}
    return endpoint + "?" + json.dumps(clean, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


class CassetteTransport:
    """Record/replay of raw eUtils responses keyed by endpoint and parameters."""

    def __init__(self, cassette: str | Path, inner: Transport | None = None, mode: str = "replay"):
        if mode not in ("record", "replay"):
            raise ValueError(f"unknown cassette mode {mode!r}")
        if mode == "record" and inner is None:
            raise ValueError("record mode needs an inner transport")
        self.cassette = Path(cassette)
        self.inner = inner
        self.mode = mode
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        if self.cassette.exists():
            self._entries = json.loads(self.cassette.read_text(encoding="utf-8")).get("interactions", {})
        elif mode == "replay":
            raise IoError(f"no such cassette: {self.cassette}")

    def get(self, endpoint: str, params: Mapping[str, str]) -> str:
        key = _cassette_key(endpoint, params)
        with self._lock:
            if key in self._entries:
                return self._entries[key]
        if self.mode == "replay":
            raise ScriptMiss(key)
        text = self.inner.get(endpoint, params)  # type: ignore[union-attr]
        with self._lock:
            self._entries[key] = text
            atomic_write_text(self.cassette, dump_json({"interactions": self._entries}))
        return text


class FixtureTransport:
    """Serves eUtils-shaped payloads from a small JSON fixture.

    Fixture layout::

        {"searches": {"<query>": ["pmid", ...]},
         "articles": {"<pmid>": {"title": "...", "abstract": "..."}},
         "rejected": ["<query that eUtils refuses>"]}

    Unknown queries return zero hits. The ``retmax`` parameter is honoured.
    ``requests`` logs every (endpoint, params) pair served.
    """

    def __init__(self, searches: Mapping[str, Sequence[str]], articles: Mapping[str, Mapping[str, str]], rejected: Iterable[str] = ()):
        self.searches = {q: list(p) for q, p in searches.items()}
        self.articles = {k: dict(v) for k, v in articles.items()}
        self.rejected = set(rejected)
        self.requests: list[tuple[str, dict[str, str]]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> FixtureTransport:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise IoError(f"no such fixture: {path}") from exc
        return cls(data.get("searches", {}), data.get("articles", {}), data.get("rejected", ()))

    def get(self, endpoint: str, params: Mapping[str, str]) -> str:
        with self._lock:
            self.requests.append((endpoint, dict(params)))
        if endpoint == "esearch.fcgi":
            term = params["term"]
            if term in self.rejected:
                return json.dumps({"esearchresult": {"ERROR": f"Invalid query: {term}"}})
            hits = self.searches.get(term, [])
            retmax = int(params.get("retmax", 20))
            return json.dumps(
                {"esearchresult": {"count": str(len(hits)), "retmax": str(min(retmax, len(hits))), "idlist": hits[:retmax]}}
            )
        if endpoint == "efetch.fcgi":
            parts = ["<?xml version=\"1.0\" ?>", "<PubmedArticleSet>"]
            for pmid in params["id"].split(","):
                rec = self.articles.get(pmid)
                if rec is None:
                    continue
                parts.append(
                    "<PubmedArticle><MedlineCitation>"
                    f"<PMID Version=\"1\">{pmid}</PMID><Article>"
                    f"<ArticleTitle>{escape(rec['title'])}</ArticleTitle>"
                )
                if rec.get("abstract"):
                    parts.append(f"<Abstract><AbstractText>{escape(rec['abstract'])}</AbstractText></Abstract>")
                parts.append("</Article></MedlineCitation></PubmedArticle>")
            parts.append("</PubmedArticleSet>")
            return "".join(parts)
        raise ValueError(f"fixture transport does not serve {endpoint}")


def parse_esearch(payload: str) -> list[str]:
    try:
        data = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise ParseError(f"esearch returned non-JSON: {payload[:120]!r}") from exc
    if "error" in data:
        raise QuerySyntaxRejected(str(data["error"]))
    result = data.get("esearchresult")
    if not isinstance(result, dict):
        raise ParseError("esearch payload lacks 'esearchresult'")
    if "ERROR" in result:
        raise QuerySyntaxRejected(str(result["ERROR"]))
    ids = result.get("idlist", [])
    bad = [i for i in ids if not is_pmid(str(i))]
    if bad:
        raise ParseError(f"esearch returned invalid PMIDs {bad[:3]}")
    return [str(i) for i in ids]


def _text(elem: ET.Element | None) -> str:
    if elem is None:
        return ""
    return " ".join("".join(elem.itertext()).split())


def parse_efetch(payload: str) -> dict[str, Article]:
    try:
        root = ET.fromstring(payload)
    except ET.ParseError as exc:
        raise ParseError(f"efetch returned malformed XML: {exc}") from exc
    out: dict[str, Article] = {}
    for art in root.iter("PubmedArticle"):
        cit = art.find("MedlineCitation")
        if cit is None:
            continue
        pmid = _text(cit.find("PMID"))
        title = _text(cit.find("Article/ArticleTitle")) or _text(cit.find("Article/VernacularTitle"))
        abstract = " ".join(t for t in (_text(a) for a in cit.findall("Article/Abstract/AbstractText")) if t)
        if not pmid or not title:
            log.warning("skipping efetch record without PMID or title (pmid=%r)", pmid)
            continue
        out[pmid] = Article(pmid, title, abstract or None)
    return out


class PubMedClient:
    def __init__(self, transport: Transport, datetype: str = "pdat"):
        self.transport = transport
        self.datetype = datetype

    def search(self, request: SearchRequest) -> list[str]:
        params = {
            "db": "pubmed",
            "term": request.query,
            "sort": "relevance",
            "retmax": str(request.limit),
            "datetype": self.datetype,
            "mindate": "1800/01/01",  # eUtils ignores maxdate unless mindate is also set
            "maxdate": request.max_date.strftime("%Y/%m/%d"),
            "retmode": "json",
        }
        pmids = parse_esearch(self.transport.get("esearch.fcgi", params))
        return pmids[: request.limit]

    def fetch_articles(self, pmids: Sequence[str]) -> list[Article | MissingArticle]:
        if not pmids:
            raise PreconditionError("fetch_articles needs at least one PMID")
        bad = [p for p in pmids if not is_pmid(p)]
        if bad:
            raise PreconditionError(f"invalid PMIDs: {bad[:3]}")
        found: dict[str, Article] = {}
        unique = list(dict.fromkeys(pmids))
        for i in range(0, len(unique), EFETCH_BATCH):
            chunk = unique[i : i + EFETCH_BATCH]
            params = {"db": "pubmed", "id": ",".join(chunk), "retmode": "xml"}
            found.update(parse_efetch(self.transport.get("efetch.fcgi", params)))
        missing = [p for p in unique if p not in found]
        if missing:
            log.warning("efetch returned no record for %d PMIDs: %s", len(missing), ",".join(missing[:10]))
        return [found.get(p) or MissingArticle(p) for p in pmids]


def make_client(config: Any) -> PubMedClient:
    kind = config.pubmed_backend
    transport: Transport
    if kind == "fixture":
        if config.pubmed_fixture is None:
            raise ConfigError("pubmed_backend=fixture needs pubmed_fixture")
        transport = FixtureTransport.from_file(config.pubmed_fixture)
    elif kind in ("http", "record", "replay"):
        def live() -> HttpTransport:
            return HttpTransport(
                config.pubmed_base_url,
                api_key=config.pubmed_api_key(),
                rate_limiter=RateLimiter(config.pubmed_rate_limit),
                retry_max=config.retry_max,
                backoff=Backoff(base=config.retry_base_delay),
            )

        if kind == "http":
            transport = live()
        else:
            if config.pubmed_cassette is None:
                raise ConfigError(f"pubmed_backend={kind} needs pubmed_cassette")
            inner: Transport | None = None
            if kind == "record":
                inner = FixtureTransport.from_file(config.pubmed_fixture) if config.pubmed_fixture else live()
            transport = CassetteTransport(config.pubmed_cassette, inner, mode=kind)
    else:
        raise ConfigError(f"unknown pubmed_backend {kind!r}")
    return PubMedClient(transport, datetype=config.pubmed_datetype)
