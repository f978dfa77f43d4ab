"""Offline evaluation: retrieval, yes/no, factoid, list, span F1 and run variance.

Average precision follows the BioASQ convention of dividing by
``min(|gold|, 10)`` since at most ten documents may be submitted.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence

from .core import QType, Question, QuestionResult
from .errors import DuplicateDocument, EmptyInput, KeyMismatch

AP_CUTOFF = 10
DEFAULT_EPSILON = 0.01

Normalizer = Callable[[str], str]


def default_normalizer(text: str) -> str:
    return text.strip().casefold()


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


# -- retrieval ---------------------------------------------------------------------


def average_precision(retrieved: Sequence[str], gold: Iterable[str], cutoff: int = AP_CUTOFF) -> float:
    if len(set(retrieved)) != len(retrieved):
        raise DuplicateDocument("retrieved list contains duplicates")
    gold = set(gold)
    if not gold:
        return 0.0
    hits = 0
    total = 0.0
    for rank, doc in enumerate(retrieved, start=1):
        if doc in gold:
            hits += 1
            total += hits / rank
    return total / min(len(gold), cutoff)


def map_gmap(aps: Sequence[float], epsilon: float = DEFAULT_EPSILON) -> tuple[float, float]:
    if not aps:
        raise EmptyInput("no AP values")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    mean = math.fsum(aps) / len(aps)
    gmean = math.exp(math.fsum(math.log(max(a, epsilon)) for a in aps) / len(aps))
    return mean, gmean


@dataclass(frozen=True)
class RetrievalEval:
    per_question_ap: dict[str, float]
    mean_precision: float
    mean_recall: float
    mean_f1: float
    map: float
    gmap: float
    epsilon: float

    def summary(self) -> dict[str, float]:
        return {
            "mean_precision": self.mean_precision,
            "mean_recall": self.mean_recall,
            "mean_f1": self.mean_f1,
            "map": self.map,
            "gmap": self.gmap,
        }


def retrieval_eval(
    runs: Mapping[str, Sequence[str]], gold: Mapping[str, Iterable[str]], epsilon: float = DEFAULT_EPSILON
) -> RetrievalEval:
    """Evaluate every question in ``gold``; questions absent from ``runs`` score zero."""
    if not gold:
        raise EmptyInput("no gold questions")
    aps, ps, rs, fs = {}, [], [], []
    for qid in sorted(gold):
        g = set(gold[qid])
        ret = list(runs.get(qid, ()))
        aps[qid] = average_precision(ret, g)
        tp = len(set(ret) & g)
        p, r = _ratio(tp, len(ret)), _ratio(tp, len(g))
        ps.append(p)
        rs.append(r)
        fs.append(_f1(p, r))
    m, gm = map_gmap(list(aps.values()), epsilon)
    n = len(gold)
    return RetrievalEval(aps, math.fsum(ps) / n, math.fsum(rs) / n, math.fsum(fs) / n, m, gm, epsilon)


# -- exact answers -----------------------------------------------------------------


def yesno_eval(pairs: Sequence[tuple[str, str]]) -> tuple[float, float, float, float]:
    """``(accuracy, f1_yes, f1_no, macro_f1)`` over ``(gold, predicted)`` pairs."""
    if not pairs:
        raise EmptyInput("no yes/no pairs")
    correct = sum(g == p for g, p in pairs)

    def class_f1(label: str) -> float:
        tp = sum(g == label and p == label for g, p in pairs)
        fp = sum(g != label and p == label for g, p in pairs)
        fn = sum(g == label and p != label for g, p in pairs)
        return _f1(_ratio(tp, tp + fp), _ratio(tp, tp + fn))

    f_yes, f_no = class_f1("yes"), class_f1("no")
    return correct / len(pairs), f_yes, f_no, (f_yes + f_no) / 2


def factoid_eval(
    items: Sequence[tuple[Iterable[str], Sequence[str]]], normalize: Normalizer = default_normalizer
) -> tuple[float, float, float]:
    """``(strict, lenient, mrr)``; each item is (gold synonyms, ranked predictions)."""
    if not items:
        raise EmptyInput("no factoid items")
    strict = lenient = rr = 0.0
    for synonyms, preds in items:
        gold = {normalize(s) for s in synonyms}
        for rank, pred in enumerate(list(preds)[:5], start=1):
            if normalize(pred) in gold:
                strict += rank == 1
                lenient += 1
                rr += 1 / rank
                break
    n = len(items)
    return strict / n, lenient / n, rr / n


def list_eval(
    items: Sequence[tuple[Sequence[Iterable[str]], Sequence[str]]], normalize: Normalizer = default_normalizer
) -> tuple[float, float, float]:
    """Mean per-question precision, recall and F1.

    Each item pairs the gold answer (a list of synonym sets) with the predicted
    entries. A prediction is correct if it matches a synonym of any gold item;
    a gold item is covered if any prediction matches one of its synonyms.
    """
    if not items:
        raise EmptyInput("no list items")
    ps, rs, fs = [], [], []
    for gold_items, preds in items:
        gold_sets = [{normalize(s) for s in syns} for syns in gold_items]
        pred_norm = [normalize(p) for p in preds]
        all_gold = set().union(*gold_sets) if gold_sets else set()
        matched = sum(p in all_gold for p in pred_norm)
        covered = sum(bool(g & set(pred_norm)) for g in gold_sets)
        p, r = _ratio(matched, len(pred_norm)), _ratio(covered, len(gold_sets))
        ps.append(p)
        rs.append(r)
        fs.append(_f1(p, r))
    n = len(items)
    return math.fsum(ps) / n, math.fsum(rs) / n, math.fsum(fs) / n


def span_micro_f1(gold: Iterable[Hashable], pred: Iterable[Hashable]) -> tuple[float, float, float]:
    """Exact-match micro P/R/F1 over sets of tuples.

    Use ``(doc, start, end)`` for NER, ``(doc, start, end, code)`` for linking
    and ``(doc, code)`` for indexing.
    """
    g, p = set(gold), set(pred)
    tp = len(g & p)
    precision, recall = _ratio(tp, len(p)), _ratio(tp, len(g))
    return precision, recall, _f1(precision, recall)


# -- repeated runs -----------------------------------------------------------------


@dataclass(frozen=True)
class MetricSpread:
    mean: float
    stddev: float
    min: float
    max: float


def variance_report(metric_runs: Sequence[Mapping[str, float]]) -> dict[str, MetricSpread]:
    if len(metric_runs) < 2:
        raise EmptyInput("variance needs at least two runs")
    keys = set(metric_runs[0])
    for i, run in enumerate(metric_runs[1:], start=1):
        if set(run) != keys:
            raise KeyMismatch(f"run {i} has metrics {sorted(run)}, expected {sorted(keys)}")
    out = {}
    for k in sorted(keys):
        vals = [float(r[k]) for r in metric_runs]
        out[k] = MetricSpread(statistics.fmean(vals), statistics.stdev(vals), min(vals), max(vals))
    return out


# -- gold-file helpers -------------------------------------------------------------


def gold_synonyms(qtype: QType, raw: Any) -> list[list[str]]:
    """Gold exact answer as a list of synonym lists.

    Factoid golds come either as ``["a", "b"]`` or ``[["a", "b"]]`` and describe
    one entity; list golds are ``[["a", "a2"], ["b"]]``.
    """
    if raw is None:
        return []
    if isinstance(raw, str):
        return [[raw]]
    if qtype is QType.FACTOID:
        flat = [s for item in raw for s in (item if isinstance(item, list) else [item])]
        return [[str(s) for s in flat]]
    return [[str(s) for s in (item if isinstance(item, list) else [item])] for item in raw]


def evaluate_submission(
    questions: Sequence[Question],
    results: Mapping[str, QuestionResult],
    epsilon: float = DEFAULT_EPSILON,
    normalize: Normalizer = default_normalizer,
) -> dict[str, Any]:
    """Every metric family for which both gold and predictions exist."""
    report: dict[str, Any] = {}
    with_docs = [q for q in questions if q.gold_documents]
    if with_docs and any(r.documents is not None for r in results.values()):
        ev = retrieval_eval(
            {qid: r.documents or () for qid, r in results.items()},
            {q.id: q.gold_documents for q in with_docs},
            epsilon,
        )
        report["retrieval"] = ev.summary()

    def exact(q: Question) -> QuestionResult | None:
        r = results.get(q.id)
        return r if r is not None and r.exact is not None else None

    yn = [(str(q.gold_exact).strip().lower(), results[q.id].exact.verdict) for q in questions
          if q.qtype is QType.YESNO and q.gold_exact is not None and exact(q)]
    if yn:
        acc, fy, fn, macro = yesno_eval(yn)
        report["yesno"] = {"accuracy": acc, "f1_yes": fy, "f1_no": fn, "macro_f1": macro, "n": len(yn)}

    fa = [(gold_synonyms(QType.FACTOID, q.gold_exact)[0], results[q.id].exact.entries) for q in questions
          if q.qtype is QType.FACTOID and q.gold_exact is not None and exact(q)]
    if fa:
        s, l, m = factoid_eval(fa, normalize)
        report["factoid"] = {"strict_acc": s, "lenient_acc": l, "mrr": m, "n": len(fa)}

    li = [(gold_synonyms(QType.LIST, q.gold_exact), results[q.id].exact.entries) for q in questions
          if q.qtype is QType.LIST and q.gold_exact is not None and exact(q)]
    if li:
        p, r, f = list_eval(li, normalize)
        report["list"] = {"mean_precision": p, "mean_recall": r, "mean_f1": f, "n": len(li)}
    return report


def flatten_report(report: Mapping[str, Any]) -> dict[str, float]:
    """``{"family.metric": value}`` without the ``n`` counters."""
    return {
        f"{family}.{name}": float(value)
        for family, values in report.items()
        for name, value in values.items()
        if name != "n"
    }


def format_table(rows: Mapping[str, Mapping[str, float]] | Mapping[str, float], digits: int = 4) -> str:
    """Aligned plain-text table of ``metric -> value`` or ``metric -> {column: value}``."""
    items = sorted(rows.items())
    if not items:
        return ""
    if isinstance(items[0][1], Mapping):
        cols = list(items[0][1].keys())
    else:
        cols = ["value"]
        items = [(k, {"value": v}) for k, v in items]
    width = max(len("metric"), *(len(k) for k, _ in items))
    head = "metric".ljust(width) + "".join(c.rjust(digits + 6) for c in cols)
    lines = [head, "-" * len(head)]
    for k, vals in items:
        lines.append(k.ljust(width) + "".join(f"{float(vals[c]):.{digits}f}".rjust(digits + 6) for c in cols))
    return "\n".join(lines) + "\n"


def spread_rows(spread: Mapping[str, MetricSpread]) -> dict[str, dict[str, float]]:
    return {k: asdict(v) for k, v in spread.items()}
