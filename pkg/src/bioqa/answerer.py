"""Phase B: grounded or ungrounded answer generation and output repair."""

from __future__ import annotations

import json
import re
import unicodedata
from typing import Any, Sequence

from . import prompts
from .core import (
    FACTOID_MAX,
    IDEAL_MAX_WORDS,
    LIST_ENTRY_MAX_CHARS,
    LIST_MAX,
    ExactAnswer,
    IdealAnswer,
    QType,
    Question,
    QuestionResult,
    Snippet,
)
from .errors import EmptyCompletion, MalformedAnswer, PreconditionError, Unnormalizable
from .llm import Gateway, Step, user_exchange

__all__ = [
    "Answerer",
    "ExactAnswer",
    "IdealAnswer",
    "build_context",
    "normalize_yesno",
    "parse_json_string_array",
]

_FENCE_RE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n?(.*?)```", re.DOTALL)


def build_context(snippets: Sequence[Snippet] | None) -> str:
    return "\n".join(s.text for s in snippets or ())


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith(("P", "S")):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith(("P", "S")):
        end -= 1
    return token[start:end]


def normalize_yesno(raw: str) -> str:
    if not raw or not raw.strip():
        raise Unnormalizable("empty yes/no answer")
    for token in raw.lower().split():
        word = _strip_punct(token)
        if word in ("yes", "no"):
            return word
    raise Unnormalizable(f"no yes/no token in {raw[:80]!r}")


def _as_string_list(value: Any, coerce: bool) -> list[str] | None:
    if not isinstance(value, list):
        return None
    out = []
    for item in value:
        if isinstance(item, str):
            out.append(item)
        elif coerce and isinstance(item, (int, float)) and not isinstance(item, bool):
            out.append(json.dumps(item))
        else:
            return None
    return out


def _loads(text: str) -> Any:
    try:
        return json.loads(text)
    except (json.JSONDecodeError, RecursionError):
        return None


def _first_balanced_array(text: str) -> str | None:
    """First ``[ ... ]`` span whose brackets balance, ignoring brackets inside JSON strings."""
    start = text.find("[")
    while start != -1:
        depth = 0
        in_str = esc = False
        for i in range(start, len(text)):
            c = text[i]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == "[":
                depth += 1
            elif c == "]":
                depth -= 1
                if depth == 0:
                    return text[start : i + 1]
        start = text.find("[", start + 1)
    return None


def parse_json_string_array(raw: str) -> list[str]:
    """Parse a model's JSON string array, repairing common formatting slips.

    Tries, in order: the raw text; the text inside a Markdown code fence; the
    first balanced ``[...]`` substring; and finally the same candidates again
    accepting numbers, which are turned into strings. Entries are stripped and
    empty ones dropped.
    """
    if not raw or not raw.strip():
        raise MalformedAnswer("empty answer")
    candidates = [raw.strip()]
    fence = _FENCE_RE.search(raw)
    if fence:
        candidates.append(fence.group(1).strip())
    span = _first_balanced_array(candidates[-1])
    if span is not None:
        candidates.append(span)
    for coerce in (False, True):
        for cand in candidates:
            items = _as_string_list(_loads(cand), coerce)
            if items is not None:
                return [s for s in (x.strip() for x in items) if s]
    raise MalformedAnswer(f"no JSON string array in {raw[:80]!r}")


def _dedup_casefold(entries: Sequence[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for e in entries:
        key = e.casefold()
        if key not in seen:
            seen.add(key)
            out.append(e)
    return out


def truncate_words(text: str, limit: int = IDEAL_MAX_WORDS) -> str:
    words = text.split()
    if len(words) <= limit:
        return text
    # cut the original string after the limit-th word so inner spacing survives
    matches = list(re.finditer(r"\S+", text))
    return text[: matches[limit - 1].end()]


class Answerer:
    def __init__(self, gateway: Gateway, model_id: str):
        self.gateway = gateway
        self.model_id = model_id

    def _ask(self, content: str) -> str:
        return self.gateway.complete(user_exchange(self.model_id, content, Step.ANSWERING))

    def answer_ideal(self, question: Question, context: str) -> IdealAnswer:
        text = self._ask(prompts.ideal(context, question.body)).strip()
        if not text:
            raise EmptyCompletion(f"empty ideal answer for {question.id}")
        return IdealAnswer(truncate_words(text))

    def answer_yesno(self, question: Question, context: str) -> ExactAnswer:
        if question.qtype is not QType.YESNO:
            raise PreconditionError(f"{question.id} is not a yes/no question")
        return ExactAnswer.yesno(normalize_yesno(self._ask(prompts.yesno(context, question.body))))

    def answer_factoid(self, question: Question, context: str) -> ExactAnswer:
        if question.qtype is not QType.FACTOID:
            raise PreconditionError(f"{question.id} is not a factoid question")
        entries = parse_json_string_array(self._ask(prompts.factoid(context, question.body)))
        return ExactAnswer.factoid(_dedup_casefold(entries)[:FACTOID_MAX])

    def answer_list(self, question: Question, context: str) -> ExactAnswer:
        if question.qtype is not QType.LIST:
            raise PreconditionError(f"{question.id} is not a list question")
        entries = parse_json_string_array(self._ask(prompts.listans(context, question.body)))
        clipped = [e[:LIST_ENTRY_MAX_CHARS].rstrip() for e in entries]
        return ExactAnswer.listans(_dedup_casefold(clipped)[:LIST_MAX])

    def answer(self, question: Question, grounded: bool) -> QuestionResult:
        """Ideal answer for every question plus the exact answer its type calls for."""
        context = build_context(question.gold_snippets if grounded else None)
        exact = None
        if question.qtype is QType.YESNO:
            exact = self.answer_yesno(question, context)
        elif question.qtype is QType.FACTOID:
            exact = self.answer_factoid(question, context)
        elif question.qtype is QType.LIST:
            exact = self.answer_list(question, context)
        ideal = self.answer_ideal(question, context)
        return QuestionResult(question.id, exact=exact, ideal=ideal)
