"""Domain types, run configuration and BioASQ file I/O."""

from __future__ import annotations

import dataclasses
import datetime as dt
import enum
import json
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import tomli

from .errors import ConfigError, IoError, SchemaError, UnknownQuestionId

PUBMED_URL_PREFIX = "http://www.ncbi.nlm.nih.gov/pubmed/"
_PMID_RE = re.compile(r"^[0-9]+$")
_PUBMED_URL_RE = re.compile(r"^https?://(?:www\.)?ncbi\.nlm\.nih\.gov/pubmed/([0-9]+)/?$")

FACTOID_MAX = 5
LIST_MAX = 100
LIST_ENTRY_MAX_CHARS = 100
IDEAL_MAX_WORDS = 200


class QType(str, enum.Enum):
    YESNO = "yesno"
    FACTOID = "factoid"
    LIST = "list"
    SUMMARY = "summary"


def is_pmid(text: str) -> bool:
    return bool(_PMID_RE.match(text))


def pmid_to_url(pmid: str) -> str:
    if not is_pmid(pmid):
        raise ValueError(f"not a PMID: {pmid!r}")
    return PUBMED_URL_PREFIX + pmid


def url_to_pmid(url: str) -> str:
    """Accept either a PubMed URL or a bare PMID and return the bare PMID."""
    url = url.strip()
    if is_pmid(url):
        return url
    m = _PUBMED_URL_RE.match(url)
    if not m:
        raise ValueError(f"not a PubMed document reference: {url!r}")
    return m.group(1)


@dataclass(frozen=True)
class Snippet:
    document_id: str
    text: str
    section: str = "abstract"
    begin_offset: int = 0
    end_offset: int = 0

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("snippet text must be nonempty")
        if self.section not in ("title", "abstract"):
            raise ValueError(f"unknown snippet section {self.section!r}")
        if self.begin_offset > self.end_offset:
            raise ValueError("begin_offset > end_offset")


@dataclass(frozen=True)
class Question:
    id: str
    body: str
    qtype: QType
    gold_documents: tuple[str, ...] | None = None
    gold_snippets: tuple[Snippet, ...] | None = None
    # Raw gold exact answer as it appears in the BioASQ file; used only for evaluation.
    gold_exact: Any = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("question id must be nonempty")
        if not self.body:
            raise ValueError("question body must be nonempty")
        if not isinstance(self.qtype, QType):
            raise ValueError(f"bad qtype {self.qtype!r}")


@dataclass(frozen=True)
class GenerationProfile:
    temperature: float = 0.0
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0

    def __post_init__(self) -> None:
        for name in ("frequency_penalty", "presence_penalty"):
            v = getattr(self, name)
            if not -2.0 <= v <= 2.0:
                raise ValueError(f"{name}={v} outside [-2, 2]")

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ExactAnswer:
    """Type-tagged exact answer.

    ``verdict`` is set only for yes/no questions, ``entries`` only for
    factoid and list questions; summary questions carry neither.
    """

    kind: QType
    verdict: str | None = None
    entries: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind is QType.YESNO:
            if self.verdict not in ("yes", "no"):
                raise ValueError(f"yes/no verdict must be 'yes' or 'no', got {self.verdict!r}")
        elif self.verdict is not None:
            raise ValueError("verdict only allowed on yes/no answers")
        if self.kind is QType.FACTOID and len(self.entries) > FACTOID_MAX:
            raise ValueError(f"factoid answer has {len(self.entries)} > {FACTOID_MAX} entries")
        if self.kind is QType.LIST:
            if len(self.entries) > LIST_MAX:
                raise ValueError(f"list answer has {len(self.entries)} > {LIST_MAX} entries")
            if any(len(e) > LIST_ENTRY_MAX_CHARS for e in self.entries):
                raise ValueError(f"list entry longer than {LIST_ENTRY_MAX_CHARS} characters")
        if self.kind in (QType.YESNO, QType.SUMMARY) and self.entries:
            raise ValueError(f"{self.kind.value} answers carry no entries")

    @classmethod
    def yesno(cls, verdict: str) -> ExactAnswer:
        return cls(QType.YESNO, verdict=verdict)

    @classmethod
    def factoid(cls, entries: Iterable[str]) -> ExactAnswer:
        return cls(QType.FACTOID, entries=tuple(entries))

    @classmethod
    def listans(cls, entries: Iterable[str]) -> ExactAnswer:
        return cls(QType.LIST, entries=tuple(entries))

    def to_bioasq(self) -> Any:
        if self.kind is QType.YESNO:
            return self.verdict
        if self.kind in (QType.FACTOID, QType.LIST):
            return [[e] for e in self.entries]
        return None


@dataclass(frozen=True)
class IdealAnswer:
    text: str

    def __post_init__(self) -> None:
        if len(self.text.split()) > IDEAL_MAX_WORDS:
            raise ValueError(f"ideal answer exceeds {IDEAL_MAX_WORDS} words")


@dataclass(frozen=True)
class QuestionResult:
    """Everything a pipeline produced for one question."""

    question_id: str
    documents: tuple[str, ...] | None = None
    exact: ExactAnswer | None = None
    ideal: IdealAnswer | None = None


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    model_id: str = "gpt-4"
    api_base_url: str = "https://api.openai.com/v1"
    api_key_env_var: str = "OPENAI_API_KEY"
    max_date: dt.date = dt.date(2022, 12, 31)
    search_limit: int = 50
    output_limit: int = 10
    expansion_enabled: bool = True
    grounded: bool = True
    cache_dir: Path | None = None
    retry_max: int = 5
    retry_base_delay: float = 1.0
    request_timeout: float = 120.0
    workers: int = 4
    concurrency_limit: int = 4

    # backend selection: "http", "scripted", "record", "replay" (llm);
    # "http", "fixture", "record", "replay" (pubmed)
    llm_backend: str = "http"
    llm_script: Path | None = None
    llm_cassette: Path | None = None
    pubmed_backend: str = "http"
    pubmed_fixture: Path | None = None
    pubmed_cassette: Path | None = None
    pubmed_base_url: str = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"
    pubmed_api_key_env_var: str | None = None
    pubmed_rate_limit: float = 3.0
    pubmed_datetype: str = "pdat"

    gmap_epsilon: float = 0.01

    gazetteer_path: Path | None = None
    gazetteer_code_column: str = "code"
    gazetteer_term_column: str = "term"
    gazetteer_tag_column: str = "semantic_tag"
    link_threshold: float = 0.25
    few_shot_path: Path | None = None
    few_shot_count: int = 3

    def __post_init__(self) -> None:
        if self.search_limit < 1:
            raise ConfigError("search_limit must be >= 1")
        if self.output_limit > self.search_limit:
            raise ConfigError("output_limit must not exceed search_limit")
        if self.retry_max < 0:
            raise ConfigError("retry_max must be >= 0")
        if self.workers < 1 or self.concurrency_limit < 1:
            raise ConfigError("workers and concurrency_limit must be >= 1")
        if not 0.0 <= self.link_threshold <= 1.0:
            raise ConfigError("link_threshold must lie in [0, 1]")
        if self.gmap_epsilon <= 0:
            raise ConfigError("gmap_epsilon must be > 0")

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env_var) or None

    def pubmed_api_key(self) -> str | None:
        if not self.pubmed_api_key_env_var:
            return None
        return os.environ.get(self.pubmed_api_key_env_var) or None

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value: Any, base_dir: Path | None) -> Any:
    ftype = str(_CONFIG_FIELDS[name].type)
    if value is None:
        return None
    if "Path" in ftype:
        p = Path(value).expanduser()
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return p
    if "date" in ftype:
        if isinstance(value, dt.date):
            return value
        try:
            return dt.date.fromisoformat(str(value).replace("/", "-"))
        except ValueError as exc:
            raise ConfigError(f"{name}: not an ISO date: {value!r}") from exc
    if ftype == "bool":
        if isinstance(value, bool):
            return value
        lowered = str(value).strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {value!r}")
    try:
        if ftype == "int":
            if isinstance(value, bool):
                raise ValueError
            return int(value)
        if ftype == "float":
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: expected {ftype}, got {value!r}") from exc
    return str(value)


def build_config(values: Mapping[str, Any], base_dir: Path | None = None) -> RunConfig:
    unknown = set(values) - set(_CONFIG_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if any(k.lower().endswith("api_key") for k in values):
        raise ConfigError("API keys are read from environment variables only")
    kwargs = {k: _coerce(k, v, base_dir) for k, v in values.items()}
    return RunConfig(**kwargs)


def load_config(path: str | Path | None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Read a flat TOML config (sections are flattened) and apply CLI overrides.

    Relative paths in the file resolve against the file's directory; relative
    paths in overrides resolve against the working directory.
    """
    values: dict[str, Any] = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomli.loads(path.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for key, value in raw.items():
            if isinstance(value, dict):
                values.update(value)
            else:
                values[key] = value
        base_dir = path.parent
    resolved = {k: _coerce(k, v, base_dir) for k, v in values.items() if k in _CONFIG_FIELDS}
    resolved.update({k: v for k, v in values.items() if k not in _CONFIG_FIELDS})
    for key, value in (overrides or {}).items():
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"unknown override key {key!r}")
        resolved[key] = _coerce(key, value, Path.cwd())
    return build_config(resolved)


# -- BioASQ files ----------------------------------------------------------------


def _read_json(path: str | Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise IoError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _parse_snippet(raw: Mapping[str, Any], where: str) -> Snippet:
    try:
        doc = url_to_pmid(str(raw["document"]))
        text = str(raw["text"])
    except KeyError as exc:
        raise SchemaError(f"{where}: snippet missing {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc
    section = str(raw.get("beginSection", "abstract"))
    if section.startswith("section"):
        # full-text section names from older releases; treat as abstract text
        section = "abstract"
    try:
        return Snippet(
            document_id=doc,
            text=text,
            section=section,
            begin_offset=int(raw.get("offsetInBeginSection", 0)),
            end_offset=int(raw.get("offsetInEndSection", len(text))),
        )
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def _parse_question(raw: Any, index: int) -> Question:
    where = f"questions[{index}]"
    if not isinstance(raw, dict):
        raise SchemaError(f"{where}: expected an object")
    for key in ("id", "body", "type"):
        if key not in raw:
            raise SchemaError(f"{where}: missing required field {key!r}")
    try:
        qtype = QType(raw["type"])
    except ValueError:
        raise SchemaError(f"{where}: unknown question type {raw['type']!r}") from None
    docs = None
    if raw.get("documents") is not None:
        try:
            docs = tuple(url_to_pmid(str(d)) for d in raw["documents"])
        except ValueError as exc:
            raise SchemaError(f"{where}: {exc}") from exc
    snippets = None
    if raw.get("snippets") is not None:
        snippets = tuple(_parse_snippet(s, f"{where}.snippets[{i}]") for i, s in enumerate(raw["snippets"]))
    try:
        return Question(
            id=str(raw["id"]),
            body=str(raw["body"]),
            qtype=qtype,
            gold_documents=docs,
            gold_snippets=snippets,
            gold_exact=raw.get("exact_answer"),
        )
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def load_questions(path: str | Path) -> list[Question]:
    data = _read_json(path)
    if not isinstance(data, dict) or not isinstance(data.get("questions"), list):
        raise SchemaError(f"{path}: expected a top-level 'questions' array")
    return [_parse_question(q, i) for i, q in enumerate(data["questions"])]


def submission_dict(questions: Sequence[Question], results: Iterable[QuestionResult]) -> dict[str, Any]:
    by_id = {q.id: q for q in questions}
    out = []
    for res in results:
        q = by_id.get(res.question_id)
        if q is None:
            raise UnknownQuestionId(res.question_id)
        entry: dict[str, Any] = {"id": q.id, "body": q.body, "type": q.qtype.value}
        if res.documents is not None:
            entry["documents"] = [pmid_to_url(p) for p in res.documents]
            entry["snippets"] = []
        if res.exact is not None and res.exact.kind is not QType.SUMMARY:
            entry["exact_answer"] = res.exact.to_bioasq()
        if res.ideal is not None:
            entry["ideal_answer"] = res.ideal.text
        out.append(entry)
    return {"questions": out}


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_submission(questions: Sequence[Question], results: Iterable[QuestionResult], path: str | Path) -> None:
    atomic_write_text(path, dump_json(submission_dict(questions, results)))


def exact_from_bioasq(qtype: QType, raw: Any) -> ExactAnswer | None:
    """Inverse of ``ExactAnswer.to_bioasq`` for submission files (first synonym kept)."""
    if raw is None or qtype is QType.SUMMARY:
        return None
    if qtype is QType.YESNO:
        return ExactAnswer.yesno(str(raw))
    entries = []
    for item in raw:
        if isinstance(item, list):
            if item:
                entries.append(str(item[0]))
        else:
            entries.append(str(item))
    return ExactAnswer(qtype, entries=tuple(entries))


def load_submission(path: str | Path) -> dict[str, QuestionResult]:
    data = _read_json(path)
    if not isinstance(data, dict) or not isinstance(data.get("questions"), list):
        raise SchemaError(f"{path}: expected a top-level 'questions' array")
    out: dict[str, QuestionResult] = {}
    for i, raw in enumerate(data["questions"]):
        q = _parse_question(raw, i)
        ideal = raw.get("ideal_answer")
        if isinstance(ideal, list):
            ideal = ideal[0] if ideal else None
        try:
            exact = exact_from_bioasq(q.qtype, raw.get("exact_answer"))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"questions[{i}]: bad exact_answer ({exc})") from exc
        out[q.id] = QuestionResult(
            question_id=q.id,
            documents=q.gold_documents,
            exact=exact,
            ideal=IdealAnswer(ideal) if ideal else None,
        )
    return out
