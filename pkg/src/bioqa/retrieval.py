"""Phase A: LLM query expansion, PubMed search, one-shot reformulation, title reranking."""

from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass
from typing import Any, Sequence

from . import prompts
from .core import Question, RunConfig
from .errors import EmptyCompletion, MalformedReply, PreconditionError
from .llm import Gateway, Step, strip_completion, user_exchange
from .pubmed import MissingArticle, PubMedClient, SearchRequest

log = logging.getLogger(__name__)

MISSING_TITLE = "(title unavailable)"
_INT_RE = re.compile(r"[-+]?\d+")


@dataclass(frozen=True)
class RetrievalTrace:
    question_id: str
    mode: str  # "expanded" | "simple"
    query: str
    expanded_query: str | None = None
    reformulated_query: str | None = None
    raw_hits: tuple[str, ...] = ()
    rerank_reply: str = ""
    rerank_dropped: tuple[str, ...] = ()
    rerank_fallback: bool = False
    final_documents: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(set(self.final_documents)) != len(self.final_documents):
            raise ValueError("duplicate PMIDs in final_documents")
        if not set(self.final_documents) <= set(self.raw_hits):
            raise ValueError("final_documents must be drawn from raw_hits")
        if self.mode == "simple" and (self.expanded_query or self.reformulated_query):
            raise ValueError("simple mode never expands or reformulates")

    def to_json(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _ask(gateway: Gateway, model_id: str, content: str, step: Step) -> str:
    text = strip_completion(gateway.complete(user_exchange(model_id, content, step)))
    if not text:
        raise EmptyCompletion(f"{step.value} step returned an empty completion")
    return text


def expand_query(gateway: Gateway, model_id: str, question: Question) -> str:
    return _ask(gateway, model_id, prompts.expansion(question.body), Step.EXPANSION)


def reformulate_query(
    gateway: Gateway,
    model_id: str,
    question: Question,
    original_query: str,
    prior_hits: Sequence[str] = (),
) -> str:
    if prior_hits:
        raise PreconditionError("reformulation only runs after a zero-hit search")
    return _ask(gateway, model_id, prompts.reformulation(question.body, original_query), Step.REFORMULATION)


def _parse_rerank(reply: str, n: int, limit: int = 10) -> tuple[list[int], list[str]]:
    if n < 1:
        raise PreconditionError("rerank needs at least one candidate")
    tokens = _INT_RE.findall(reply)
    if not tokens:
        raise MalformedReply(f"no index in rerank reply {reply[:80]!r}")
    cap = min(limit, n)
    kept: list[int] = []
    dropped: list[str] = []
    for tok in tokens:
        idx = int(tok)
        if not 1 <= idx <= n or idx in kept or len(kept) >= cap:
            dropped.append(tok)
        else:
            kept.append(idx)
    return kept, dropped


def parse_rerank_reply(reply: str, n: int, limit: int = 10) -> list[int]:
    """1-based indices from a reply like ``"1, 2, 3, 4"``.

    Out-of-range and repeated indices are discarded (first occurrence wins) and
    at most ``min(limit, n)`` survive.
    """
    return _parse_rerank(reply, n, limit)[0]


class Retriever:
    def __init__(self, gateway: Gateway, pubmed: PubMedClient, config: RunConfig):
        self.gateway = gateway
        self.pubmed = pubmed
        self.config = config

    def _search(self, query: str) -> list[str]:
        req = SearchRequest(query, self.config.max_date, self.config.search_limit)
        return list(dict.fromkeys(self.pubmed.search(req)))

    def retrieve(self, question: Question) -> RetrievalTrace:
        cfg = self.config
        expanded = reformulated = None
        if cfg.expansion_enabled:
            expanded = expand_query(self.gateway, cfg.model_id, question)
            query = expanded
            hits = self._search(query)
            if not hits:
                reformulated = reformulate_query(self.gateway, cfg.model_id, question, expanded, hits)
                query = reformulated
                hits = self._search(query)
        else:
            query = question.body
            hits = self._search(query)

        base = dict(
            question_id=question.id,
            mode="expanded" if cfg.expansion_enabled else "simple",
            query=query,
            expanded_query=expanded,
            reformulated_query=reformulated,
            raw_hits=tuple(hits),
        )
        if not hits:
            log.info("no PubMed hits for %s", question.id)
            return RetrievalTrace(**base)

        articles = self.pubmed.fetch_articles(hits)
        titles = [MISSING_TITLE if isinstance(a, MissingArticle) else a.title for a in articles]
        wanted = min(cfg.output_limit, len(hits))
        content = prompts.rerank(titles, question.body, wanted)
        reply = self.gateway.complete(user_exchange(cfg.model_id, content, Step.RERANKING))

        fallback = False
        try:
            order, dropped = _parse_rerank(reply, len(hits), cfg.output_limit)
        except MalformedReply:
            order, dropped = [], []
        if not order:
            log.warning("unusable rerank reply for %s; keeping PubMed relevance order", question.id)
            fallback = True
            order = list(range(1, wanted + 1))
        return RetrievalTrace(
            **base,
            rerank_reply=reply,
            rerank_dropped=tuple(dropped),
            rerank_fallback=fallback,
            final_documents=tuple(hits[i - 1] for i in order),
        )


def retrieve(question: Question, config: RunConfig, gateway: Gateway, pubmed: PubMedClient) -> RetrievalTrace:
    return Retriever(gateway, pubmed, config).retrieve(question)
