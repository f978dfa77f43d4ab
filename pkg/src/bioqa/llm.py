"""Provider-neutral chat-completion gateway.

A ``Gateway`` wraps one backend (real HTTP, scripted, or a record/replay
cassette around another backend) and adds bounded retries, a write-once
on-disk response cache keyed by request fingerprint, and a concurrency cap.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from . import prompts
from .core import GenerationProfile, atomic_write_text, dump_json
from .errors import (
    AuthError,
    ConfigError,
    IoError,
    RequestRejected,
    ScriptMiss,
    TransientError,
)
from .retry import Backoff, call_with_retry

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.content:
            raise ValueError("message content must be nonempty")

    def as_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatExchange:
    model_id: str
    messages: tuple[ChatMessage, ...]
    profile: GenerationProfile
    response: str | None = None
    attempt_count: int = 0

    def __post_init__(self) -> None:
        if not self.messages or self.messages[0].role != "system":
            raise ValueError("first message must be the system prompt")

    @property
    def last_user(self) -> str:
        for m in reversed(self.messages):
            if m.role == "user":
                return m.content
        return ""

    def request_body(self) -> dict[str, Any]:
        return {
            "model": self.model_id,
            "messages": [m.as_dict() for m in self.messages],
            **self.profile.as_dict(),
        }

    def fingerprint(self) -> str:
        return fingerprint(self.model_id, self.messages, self.profile)


def fingerprint(model_id: str, messages: Sequence[ChatMessage], profile: GenerationProfile) -> str:
    canonical = json.dumps(
        {
            "model": model_id,
            "messages": [[m.role, m.content] for m in messages],
            "profile": profile.as_dict(),
        },
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Task(str, enum.Enum):
    BIOASQ = "bioasq"
    MEDPROCNER = "medprocner"


class Step(str, enum.Enum):
    EXPANSION = "expansion"
    REFORMULATION = "reformulation"
    RERANKING = "reranking"
    ANSWERING = "answering"


_PROFILES = {
    Step.EXPANSION: GenerationProfile(0.0, 0.5, 0.1),
    Step.REFORMULATION: GenerationProfile(0.0, 0.6, 0.2),
    Step.RERANKING: GenerationProfile(0.0, 0.3, 0.1),
    Step.ANSWERING: GenerationProfile(0.0, 0.0, 0.0),
}


def system_prompt(task: Task | str) -> ChatMessage:
    task = Task(task)
    text = prompts.BIOASQ_SYSTEM if task is Task.BIOASQ else prompts.MEDPROCNER_SYSTEM
    return ChatMessage("system", text)


def profile_for(step: Step | str) -> GenerationProfile:
    return _PROFILES[Step(step)]


def user_exchange(model_id: str, content: str, step: Step | str, task: Task | str = Task.BIOASQ) -> ChatExchange:
    """The common single-turn shape: system prompt followed by one user message."""
    return ChatExchange(
        model_id=model_id,
        messages=(system_prompt(task), ChatMessage("user", content)),
        profile=profile_for(step),
    )


# -- backends ------------------------------------------------------------------


class Backend(Protocol):
    def __call__(self, exchange: ChatExchange) -> str: ...


class HttpBackend:
    """OpenAI-style ``POST {base}/chat/completions``."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ):
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            base_url=base_url.rstrip("/") + "/", headers=headers, timeout=timeout, transport=transport
        )

    def __call__(self, exchange: ChatExchange) -> str:
        try:
            resp = self._client.post("chat/completions", json=exchange.request_body())
        except httpx.TimeoutException as exc:
            raise TransientError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientError(f"connection failed: {exc}") from exc
        status = resp.status_code
        if status in (401, 403):
            raise AuthError(f"HTTP {status}: {resp.text[:200]}")
        if status == 429 or status >= 500:
            raise TransientError(f"HTTP {status}: {resp.text[:200]}")
        if status >= 400:
            raise RequestRejected(f"HTTP {status}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransientError(f"unexpected response body: {resp.text[:200]}") from exc
        return content or ""

    def close(self) -> None:
        self._client.close()


@dataclass(frozen=True)
class Rule:
    """Scripted response selected by a substring of the last user message."""

    contains: str
    response: str | None = None
    error: str | None = None  # "transient" | "auth"

    def fire(self) -> str:
        if self.error == "transient":
            raise TransientError("scripted transient failure")
        if self.error == "auth":
            raise AuthError("scripted auth failure")
        assert self.response is not None
        return self.response


class ScriptedBackend:
    """Deterministic backend for tests and offline runs.

    Lookup order: exact fingerprint, then the first rule whose ``contains``
    text occurs in the last user message. Anything else is a ``ScriptMiss``.
    Every exchange it sees is appended to ``calls``.
    """

    def __init__(self, responses: Mapping[str, str] | None = None, rules: Iterable[Rule] = ()):
        self.responses = dict(responses or {})
        self.rules = list(rules)
        self.calls: list[ChatExchange] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise IoError(f"no such script: {path}") from exc
        rules = [Rule(r["contains"], r.get("response"), r.get("error")) for r in data.get("rules", [])]
        return cls(data.get("responses", {}), rules)

    def __call__(self, exchange: ChatExchange) -> str:
        with self._lock:
            self.calls.append(exchange)
        fp = exchange.fingerprint()
        if fp in self.responses:
            return self.responses[fp]
        text = exchange.last_user
        for rule in self.rules:
            if rule.contains in text:
                return rule.fire()
        raise ScriptMiss(fp, text[:80])


class RecorderBackend:
    """Record/replay wrapper that stores responses in a JSON cassette.

    In ``record`` mode unknown fingerprints go to ``inner`` and are appended
    to the cassette; in ``replay`` mode the cassette is the only source.
    """

    def __init__(self, cassette: str | Path, inner: Backend | None = None, mode: str = "replay"):
        if mode not in ("record", "replay"):
            raise ValueError(f"unknown recorder mode {mode!r}")
        if mode == "record" and inner is None:
            raise ValueError("record mode needs an inner backend")
        self.cassette = Path(cassette)
        self.inner = inner
        self.mode = mode
        self._lock = threading.Lock()
        self._entries: dict[str, dict[str, Any]] = {}
        if self.cassette.exists():
            data = json.loads(self.cassette.read_text(encoding="utf-8"))
            self._entries = dict(data.get("interactions", {}))
        elif mode == "replay":
            raise IoError(f"no such cassette: {self.cassette}")

    def __call__(self, exchange: ChatExchange) -> str:
        fp = exchange.fingerprint()
        with self._lock:
            hit = self._entries.get(fp)
        if hit is not None:
            return hit["response"]
        if self.mode == "replay":
            raise ScriptMiss(fp, exchange.last_user[:80])
        response = self.inner(exchange)  # type: ignore[misc]
        with self._lock:
            self._entries[fp] = {"request": exchange.request_body(), "response": response}
            atomic_write_text(self.cassette, dump_json({"interactions": self._entries}))
        return response


# -- gateway -------------------------------------------------------------------


class Gateway:
    def __init__(
        self,
        backend: Backend,
        retry_max: int = 5,
        base_delay: float = 1.0,
        cache_dir: str | Path | None = None,
        concurrency_limit: int = 4,
        sleep: Callable[[float], None] = time.sleep,
        backoff: Backoff | None = None,
    ):
        self.backend = backend
        self.retry_max = retry_max
        self.backoff = backoff or Backoff(base=base_delay)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.sleep = sleep
        self.network_calls = 0
        self._slots = threading.BoundedSemaphore(concurrency_limit)
        self._fp_locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _cache_path(self, fp: str) -> Path | None:
        return self.cache_dir / f"{fp}.json" if self.cache_dir else None

    def _lock_for(self, fp: str) -> threading.Lock:
        with self._guard:
            return self._fp_locks.setdefault(fp, threading.Lock())

    def send(self, exchange: ChatExchange) -> ChatExchange:
        """Complete ``exchange`` and return a copy with response and attempt count set."""
        if exchange.profile.temperature != 0.0:
            raise ValueError("pipeline requests must use temperature 0")
        fp = exchange.fingerprint()
        path = self._cache_path(fp)
        with self._lock_for(fp):
            if path is not None and path.exists():
                cached = json.loads(path.read_text(encoding="utf-8"))
                log.info("llm cache hit", extra={"event": "llm_call", "fingerprint": fp, "cached": True})
                return dataclasses.replace(exchange, response=cached["response"], attempt_count=0)

            def attempt() -> str:
                with self._guard:
                    self.network_calls += 1
                with self._slots:
                    return self.backend(exchange)

            text, attempts = call_with_retry(
                attempt, self.retry_max, self.backoff, self.sleep, what=f"chat completion {fp[:12]}"
            )
            if path is not None:
                atomic_write_text(path, dump_json({"fingerprint": fp, "request": exchange.request_body(), "response": text}))
        log.info(
            "llm call",
            extra={"event": "llm_call", "fingerprint": fp, "cached": False, "attempts": attempts},
        )
        return dataclasses.replace(exchange, response=text, attempt_count=attempts)

    def complete(self, exchange: ChatExchange) -> str:
        return self.send(exchange).response or ""


def complete(backend: Backend, exchange: ChatExchange, **gateway_options: Any) -> str:
    """One-shot completion through a throwaway ``Gateway``."""
    return Gateway(backend, **gateway_options).complete(exchange)


_FENCE_RE = re.compile(r"^```[A-Za-z0-9_-]*[ \t]*\n?(.*?)\n?```$", re.DOTALL)


def strip_completion(text: str) -> str:
    """Trim whitespace, one layer of Markdown code fence, and enclosing quotes."""
    text = text.strip()
    m = _FENCE_RE.match(text)
    if m:
        text = m.group(1).strip()
    while len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"`":
        inner = text[1:-1]
        # keep quotes that belong to the query itself, e.g. "a" OR "b"
        if text[0] in inner:
            break
        text = inner.strip()
    return text


def make_backend(config: Any) -> Backend:
    """Construct the backend named by ``config.llm_backend``."""
    kind = config.llm_backend
    if kind == "http":
        return HttpBackend(config.api_base_url, config.api_key(), timeout=config.request_timeout)
    if kind == "scripted":
        if config.llm_script is None:
            raise ConfigError("llm_backend=scripted needs llm_script")
        return ScriptedBackend.from_file(config.llm_script)
    if kind in ("record", "replay"):
        if config.llm_cassette is None:
            raise ConfigError(f"llm_backend={kind} needs llm_cassette")
        inner = None
        if kind == "record":
            inner = (
                ScriptedBackend.from_file(config.llm_script)
                if config.llm_script
                else HttpBackend(config.api_base_url, config.api_key(), timeout=config.request_timeout)
            )
        return RecorderBackend(config.llm_cassette, inner, mode=kind)
    raise ConfigError(f"unknown llm_backend {kind!r}")


__all__ = [
    "Backend",
    "ChatExchange",
    "ChatMessage",
    "Gateway",
    "HttpBackend",
    "RecorderBackend",
    "Rule",
    "ScriptedBackend",
    "Step",
    "Task",
    "complete",
    "fingerprint",
    "make_backend",
    "profile_for",
    "strip_completion",
    "system_prompt",
    "user_exchange",
]
