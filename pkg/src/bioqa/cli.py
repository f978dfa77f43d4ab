"""Command-line entry point: ``bioqa <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence, TypeVar

from . import medproc, metrics
from .answerer import Answerer
from .core import (
    Question,
    QuestionResult,
    RunConfig,
    atomic_write_text,
    dump_json,
    load_config,
    load_questions,
    load_submission,
    write_submission,
)
from .errors import AuthError, BioQAError, ConfigError, IoError
from .llm import Gateway, make_backend
from .pubmed import make_client
from .retrieval import RetrievalTrace, Retriever

log = logging.getLogger("bioqa")

T = TypeVar("T")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_CONFIG = 2

_RESERVED = {"name", "msg", "args", "levelname", "levelno", "pathname", "filename", "module", "exc_info",
             "exc_text", "stack_info", "lineno", "funcName", "created", "msecs", "relativeCreated",
             "thread", "threadName", "processName", "process", "message", "taskName"}


class JsonLinesFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {"level": record.levelname, "logger": record.name, "message": record.getMessage()}
        payload.update({k: v for k, v in record.__dict__.items() if k not in _RESERVED})
        return json.dumps(payload, sort_keys=True, ensure_ascii=False, default=str)


@dataclass
class BatchOutcome:
    results: list[Any] = field(default_factory=list)
    failures: list[dict[str, str]] = field(default_factory=list)


def run_batch(items: Sequence[T], key: Callable[[T], str], fn: Callable[[T], Any], workers: int) -> BatchOutcome:
    """Apply ``fn`` to every item; isolate per-item failures; keep input order."""

    def guarded(item: T) -> tuple[str, Any, BaseException | None]:
        try:
            return key(item), fn(item), None
        except AuthError:
            raise
        except (BioQAError, ValueError) as exc:
            log.warning("%s failed: %s", key(item), exc, extra={"event": "item_failed", "item": key(item)})
            return key(item), None, exc

    if workers == 1:
        rows = [guarded(i) for i in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(guarded, items))
    out = BatchOutcome()
    for k, res, exc in rows:
        if exc is None:
            out.results.append(res)
        else:
            out.failures.append({"id": k, "error": type(exc).__name__, "message": str(exc)})
    return out


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _gateway(cfg: RunConfig, use_cache: bool = True) -> Gateway:
    return Gateway(
        make_backend(cfg),
        retry_max=cfg.retry_max,
        base_delay=cfg.retry_base_delay,
        cache_dir=cfg.cache_dir if use_cache else None,
        concurrency_limit=cfg.concurrency_limit,
    )


def _write_summary(path: Path, verb: str, total: int, outcome: BatchOutcome) -> None:
    atomic_write_text(
        path,
        dump_json(
            {
                "verb": verb,
                "questions": total,
                "succeeded": len(outcome.results),
                "warnings": len(outcome.failures),
                "failures": outcome.failures,
            }
        ),
    )
    if outcome.failures:
        print(f"warning: {len(outcome.failures)} of {total} items failed; see {path}", file=sys.stderr)


# -- pipelines -----------------------------------------------------------------------


def phase_a(cfg: RunConfig, questions: Sequence[Question], use_cache: bool = True) -> BatchOutcome:
    retriever = Retriever(_gateway(cfg, use_cache), make_client(cfg), cfg)
    return run_batch(questions, lambda q: q.id, retriever.retrieve, cfg.workers)


def phase_b(cfg: RunConfig, questions: Sequence[Question], use_cache: bool = True) -> BatchOutcome:
    answerer = Answerer(_gateway(cfg, use_cache), cfg.model_id)
    return run_batch(questions, lambda q: q.id, lambda q: answerer.answer(q, cfg.grounded), cfg.workers)


def _traces_to_results(traces: Sequence[RetrievalTrace]) -> list[QuestionResult]:
    return [QuestionResult(t.question_id, documents=t.final_documents) for t in traces]


def cmd_run_phase_a(args: argparse.Namespace, cfg: RunConfig) -> int:
    questions = load_questions(args.input)
    out = Path(args.output)
    outcome = phase_a(cfg, questions)
    write_submission(questions, _traces_to_results(outcome.results), out)
    trace_lines = "".join(
        json.dumps(t.to_json(), sort_keys=True, ensure_ascii=False) + "\n" for t in outcome.results
    )
    atomic_write_text(_sibling(out, ".trace.jsonl"), trace_lines)
    _write_summary(_sibling(out, ".summary.json"), "run-phase-a", len(questions), outcome)
    return EXIT_OK


def cmd_run_phase_b(args: argparse.Namespace, cfg: RunConfig) -> int:
    questions = load_questions(args.input)
    out = Path(args.output)
    outcome = phase_b(cfg, questions)
    write_submission(questions, outcome.results, out)
    _write_summary(_sibling(out, ".summary.json"), "run-phase-b", len(questions), outcome)
    return EXIT_OK


def _write_report(report: dict[str, Any], out: Path, table: str) -> None:
    atomic_write_text(out, dump_json(report))
    atomic_write_text(_sibling(out, ".txt"), table)


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = Path(args.output)
    if args.task == "medprocner":
        gold = medproc.read_ner_tsv(args.gold)
        pred = medproc.read_ner_tsv(args.submission)
        report = medproc_report(gold, pred)
        _write_report(report, out, metrics.format_table(report))
        return EXIT_OK
    questions = load_questions(args.gold)
    submission = load_submission(args.submission)
    report = metrics.evaluate_submission(questions, submission, cfg.gmap_epsilon)
    _write_report(report, out, metrics.format_table(metrics.flatten_report(report)))
    return EXIT_OK


def medproc_report(gold: Sequence[medproc.Mention], pred: Sequence[medproc.Mention]) -> dict[str, Any]:
    def idx(ms: Sequence[medproc.Mention]) -> set[tuple[str, str]]:
        return {(m.document_id, m.code) for m in ms if m.code}

    report = {}
    for name, g, p in (
        ("ner", {(m.document_id, m.start, m.end) for m in gold}, {(m.document_id, m.start, m.end) for m in pred}),
        ("el", {(m.document_id, m.start, m.end, m.code) for m in gold if m.code},
         {(m.document_id, m.start, m.end, m.code) for m in pred if m.code}),
        ("indexing", idx(gold), idx(pred)),
    ):
        pr, rc, f = metrics.span_micro_f1(g, p)
        report[name] = {"precision": pr, "recall": rc, "f1": f}
    return report


def cmd_repeat(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.times < 2:
        raise ConfigError("--times must be at least 2")
    questions = load_questions(args.input)
    runner = phase_a if args.pipeline == "phase-a" else phase_b
    rows = []
    for i in range(args.times):
        outcome = runner(cfg, questions, use_cache=False)
        results = _traces_to_results(outcome.results) if args.pipeline == "phase-a" else outcome.results
        report = metrics.evaluate_submission(questions, {r.question_id: r for r in results}, cfg.gmap_epsilon)
        flat = metrics.flatten_report(report)
        flat["failures"] = float(len(outcome.failures))
        rows.append(flat)
        log.info("repeat run %d done", i + 1, extra={"event": "repeat_run", "run": i + 1})
    spread = metrics.variance_report(rows)
    out = Path(args.output)
    _write_report(
        {"runs": rows, "variance": metrics.spread_rows(spread)},
        out,
        metrics.format_table(metrics.spread_rows(spread)),
    )
    return EXIT_OK


def cmd_run_medprocner(args: argparse.Namespace, cfg: RunConfig) -> int:
    if cfg.gazetteer_path is None or cfg.few_shot_path is None:
        raise ConfigError("run-medprocner needs gazetteer_path and few_shot_path")
    linker = medproc.Linker(
        medproc.load_gazetteer(
            cfg.gazetteer_path,
            {"code": cfg.gazetteer_code_column, "term": cfg.gazetteer_term_column,
             "semantic_tag": cfg.gazetteer_tag_column},
        ),
        cfg.link_threshold,
    )
    examples = medproc.load_examples(cfg.few_shot_path)
    in_dir = Path(args.input)
    if not in_dir.is_dir():
        raise IoError(f"not a directory: {in_dir}")
    docs = sorted(in_dir.glob("*.txt"))
    gateway = _gateway(cfg)

    def one(path: Path) -> list[medproc.Mention]:
        text = path.read_text(encoding="utf-8")
        found = medproc.extract_procedures(gateway, cfg.model_id, path.stem, text, examples, cfg.few_shot_count)
        return medproc.link_mentions(found, linker)

    outcome = run_batch(docs, lambda p: p.stem, one, cfg.workers)
    mentions = [m for doc in outcome.results for m in doc]
    out = Path(args.output)
    medproc.write_ner_tsv(mentions, out / "ner.tsv")
    medproc.write_el_tsv(mentions, out / "el.tsv")
    failed = {f["id"] for f in outcome.failures}
    index = {p.stem: [] for p in docs if p.stem not in failed}
    for m in mentions:
        index[m.document_id].append(m)
    medproc.write_index_tsv({d: medproc.index_document(ms) for d, ms in index.items()}, out / "indexing.tsv")
    _write_summary(out / "summary.json", "run-medprocner", len(docs), outcome)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def _parse_overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bioqa", description="Zero-/few-shot biomedical QA pipelines.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="TOML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--output", required=True)

    p = sub.add_parser("run-phase-a", help="document retrieval")
    common(p)
    p.add_argument("--input", required=True, help="BioASQ questions JSON")
    p.set_defaults(handler=cmd_run_phase_a)

    p = sub.add_parser("run-phase-b", help="answer generation")
    common(p)
    p.add_argument("--input", required=True, help="BioASQ questions JSON with snippets")
    p.set_defaults(handler=cmd_run_phase_b)

    p = sub.add_parser("run-medprocner", help="procedure NER, linking and indexing")
    common(p)
    p.add_argument("--input", required=True, help="directory of .txt clinical reports")
    p.set_defaults(handler=cmd_run_medprocner)

    p = sub.add_parser("evaluate", help="score a submission against gold")
    common(p, config_required=False)
    p.add_argument("--task", choices=("bioasq", "medprocner"), default="bioasq")
    p.add_argument("--gold", required=True)
    p.add_argument("--submission", required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("repeat", help="rerun a pipeline N times and report metric spread")
    common(p)
    p.add_argument("--input", required=True, help="BioASQ questions JSON with gold answers")
    p.add_argument("--pipeline", choices=("phase-a", "phase-b"), default="phase-a")
    p.add_argument("--times", type=int, required=True)
    p.set_defaults(handler=cmd_repeat)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    stderr = logging.StreamHandler()
    stderr.setLevel(logging.INFO if args.verbose else logging.WARNING)
    stderr.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    events: logging.Handler | None = None
    try:
        cfg = load_config(args.config, _parse_overrides(args.overrides))
        out = Path(args.output)
        events_path = out / "events.jsonl" if args.verb == "run-medprocner" else _sibling(out, ".events.jsonl")
        events_path.parent.mkdir(parents=True, exist_ok=True)
        events = logging.FileHandler(events_path, mode="w", encoding="utf-8")
        events.setFormatter(JsonLinesFormatter())
        events.setLevel(logging.INFO)
        log.addHandler(events)
        log.addHandler(stderr)
        log.setLevel(logging.INFO)
        return args.handler(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BioQAError, OSError) as exc:
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    finally:
        log.removeHandler(stderr)
        if events is not None:
            log.removeHandler(events)
            events.close()


if __name__ == "__main__":
    sys.exit(main())
