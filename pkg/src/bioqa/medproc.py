"""MedProcNER: few-shot Spanish procedure NER, gazetteer linking, document indexing."""

from __future__ import annotations

import csv
import functools
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import snowballstemmer

from . import prompts
from .answerer import parse_json_string_array
from .core import GenerationProfile, atomic_write_text
from .errors import IoError, MissingColumn, PreconditionError, SchemaError
from .llm import ChatExchange, ChatMessage, Gateway, Task, system_prompt

log = logging.getLogger(__name__)

NER_LABEL = "PROCEDIMIENTO"
PROCEDURE_TAG = "procedure"
DEFAULT_COLUMNS = {"code": "code", "term": "term", "semantic_tag": "semantic_tag"}


@dataclass(frozen=True)
class GazetteerEntry:
    code: str
    term: str
    semantic_tag: str
    stemmed_term: str

    def __post_init__(self) -> None:
        if not self.code:
            raise ValueError("gazetteer code must be nonempty")


@dataclass(frozen=True)
class Mention:
    document_id: str
    start: int
    end: int
    text: str
    code: str | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad span [{self.start}, {self.end})")
        if self.end - self.start != len(self.text):
            raise ValueError("span length does not match mention text")


@dataclass(frozen=True)
class FewShotExample:
    input_text: str
    output_procedures: tuple[str, ...]


# -- stemming / distance ---------------------------------------------------------

_stemmer = snowballstemmer.stemmer("spanish")


@functools.lru_cache(maxsize=65536)
def _stem_word(word: str) -> str:
    return _stemmer.stemWord(word)


def stem(term: str) -> str:
    """Lowercase and Snowball-stem each whitespace token; rejoin with single spaces."""
    return " ".join(_stem_word(tok) for tok in term.lower().split())


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


# -- gazetteer ---------------------------------------------------------------------


def load_gazetteer(path: str | Path, column_map: Mapping[str, str] | None = None) -> list[GazetteerEntry]:
    cols = {**DEFAULT_COLUMNS, **(column_map or {})}
    try:
        fh = open(path, encoding="utf-8", newline="")
    except FileNotFoundError as exc:
        raise IoError(f"no such gazetteer: {path}") from exc
    with fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = reader.fieldnames or []
        for role in ("code", "term", "semantic_tag"):
            if cols[role] not in header:
                raise MissingColumn(f"gazetteer lacks column {cols[role]!r} (for {role})")
        entries = []
        for row in reader:
            tag = (row[cols["semantic_tag"]] or "").strip()
            if tag.lower() != PROCEDURE_TAG:
                continue
            code = (row[cols["code"]] or "").strip()
            term = (row[cols["term"]] or "").strip()
            if not code or not term:
                continue
            entries.append(GazetteerEntry(code, term, tag, stem(term)))
    return entries


class Linker:
    """Nearest gazetteer entry by length-normalised Levenshtein distance in stem space."""

    def __init__(self, gazetteer: Sequence[GazetteerEntry], threshold: float = 0.25):
        if not gazetteer:
            raise PreconditionError("gazetteer is empty")
        if not 0.0 <= threshold <= 1.0:
            raise PreconditionError("threshold must lie in [0, 1]")
        self.entries = list(gazetteer)
        self.threshold = threshold
        self._exact: dict[str, str] = {}
        for e in self.entries:
            best = self._exact.get(e.stemmed_term)
            if best is None or e.code < best:
                self._exact[e.stemmed_term] = e.code

    def best(self, mention_text: str) -> tuple[str, float, int] | None:
        """``(code, normalised distance, raw distance)`` of the best entry, unthresholded."""
        target = stem(mention_text)
        if not target:
            return None
        if target in self._exact:
            return self._exact[target], 0.0, 0
        best_key: tuple[float, int, str] | None = None
        n = len(target)
        for e in self.entries:
            m = len(e.stemmed_term)
            longest = max(n, m)
            # |n - m| is a lower bound on the edit distance
            if best_key is not None and abs(n - m) / longest > best_key[0]:
                continue
            d = levenshtein(target, e.stemmed_term)
            key = (d / longest, d, e.code)
            if best_key is None or key < best_key:
                best_key = key
        assert best_key is not None
        return best_key[2], best_key[0], best_key[1]

    def link(self, mention_text: str) -> str | None:
        hit = self.best(mention_text)
        if hit is None or hit[1] > self.threshold:
            return None
        return hit[0]


def link(mention_text: str, gazetteer: Sequence[GazetteerEntry], threshold: float = 0.25) -> str | None:
    return Linker(gazetteer, threshold).link(mention_text)


# -- NER ---------------------------------------------------------------------------


def load_examples(path: str | Path) -> list[FewShotExample]:
    """Few-shot examples: JSON list of ``{"text": ..., "procedures": [...]}``."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise IoError(f"no such examples file: {path}") from exc
    try:
        return [FewShotExample(d["text"], tuple(d["procedures"])) for d in data]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: each example needs 'text' and 'procedures'") from exc


def ner_exchange(model_id: str, document: str, examples: Sequence[FewShotExample]) -> ChatExchange:
    messages = [system_prompt(Task.MEDPROCNER)]
    for ex in examples:
        messages.append(ChatMessage("user", ex.input_text))
        messages.append(ChatMessage("assistant", prompts.medproc_example_output(ex.output_procedures)))
    messages.append(ChatMessage("user", prompts.medproc_final(document)))
    return ChatExchange(model_id, tuple(messages), GenerationProfile())


def locate(document_id: str, document: str, forms: Iterable[str]) -> list[Mention]:
    """All case-insensitive, non-overlapping occurrences of each surface form."""
    spans: dict[tuple[int, int], Mention] = {}
    seen: set[str] = set()
    for form in forms:
        key = form.casefold()
        if key in seen or not form.strip() or any(c in form for c in "\t\r\n"):
            continue
        seen.add(key)
        found = False
        for m in re.finditer(re.escape(form), document, flags=re.IGNORECASE):
            if m.end() == m.start():
                continue
            found = True
            spans.setdefault((m.start(), m.end()), Mention(document_id, m.start(), m.end(), m.group(0)))
        if not found:
            log.info("%s: model returned %r which does not occur in the text", document_id, form)
    return [spans[k] for k in sorted(spans)]


def extract_procedures(
    gateway: Gateway,
    model_id: str,
    document_id: str,
    document: str,
    examples: Sequence[FewShotExample],
    expected_examples: int | None = 3,
) -> list[Mention]:
    if expected_examples is not None and len(examples) != expected_examples:
        raise PreconditionError(f"expected {expected_examples} few-shot examples, got {len(examples)}")
    reply = gateway.complete(ner_exchange(model_id, document, examples))
    return locate(document_id, document, parse_json_string_array(reply))


def link_mentions(mentions: Iterable[Mention], linker: Linker) -> list[Mention]:
    return [Mention(m.document_id, m.start, m.end, m.text, linker.link(m.text)) for m in mentions]


def index_document(mentions: Iterable[Mention]) -> list[str]:
    return sorted({m.code for m in mentions if m.code})


# -- TSV output --------------------------------------------------------------------


def _tsv(rows: Iterable[Sequence[object]], header: Sequence[str]) -> str:
    lines = ["\t".join(header)]
    for row in rows:
        cells = [str(c) for c in row]
        if any("\t" in c or "\n" in c for c in cells):
            raise ValueError(f"cell contains tab or newline: {cells}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def write_ner_tsv(mentions: Iterable[Mention], path: str | Path) -> None:
    rows = [(m.document_id, NER_LABEL, m.start, m.end, m.text) for m in mentions]
    atomic_write_text(path, _tsv(rows, ("filename", "label", "start_span", "end_span", "text")))


def write_el_tsv(mentions: Iterable[Mention], path: str | Path) -> None:
    rows = [(m.document_id, NER_LABEL, m.start, m.end, m.text, m.code or "NO_CODE") for m in mentions]
    atomic_write_text(path, _tsv(rows, ("filename", "label", "start_span", "end_span", "text", "code")))


def write_index_tsv(index: Mapping[str, Sequence[str]], path: str | Path) -> None:
    rows = [(doc, "+".join(codes)) for doc, codes in sorted(index.items())]
    atomic_write_text(path, _tsv(rows, ("filename", "codes")))


def read_ner_tsv(path: str | Path) -> list[Mention]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        out = []
        for row in reader:
            code = row.get("code")
            out.append(
                Mention(
                    row["filename"],
                    int(row["start_span"]),
                    int(row["end_span"]),
                    row["text"],
                    None if code in (None, "", "NO_CODE") else code,
                )
            )
    return out
