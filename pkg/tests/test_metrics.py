import random
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from bioqa.errors import DuplicateDocument, EmptyInput, KeyMismatch
from bioqa.metrics import (
    average_precision,
    factoid_eval,
    format_table,
    list_eval,
    map_gmap,
    retrieval_eval,
    span_micro_f1,
    variance_report,
    yesno_eval,
)


def ap_oracle(retrieved, gold):
    """Precision@r summed over relevant ranks, recomputed from scratch at each r."""
    gold = set(gold)
    if not gold:
        return 0.0
    total = Fraction(0)
    for r in range(1, len(retrieved) + 1):
        if retrieved[r - 1] in gold:
            total += Fraction(sum(d in gold for d in retrieved[:r]), r)
    return float(total / min(len(gold), 10))


def random_instance(rng):
    pool = [f"d{i}" for i in range(15)]
    retrieved = rng.sample(pool, rng.randint(0, 10))
    gold = rng.sample(pool, rng.randint(1, 5))
    return retrieved, gold


def test_ap_matches_oracle():
    rng = random.Random(11)
    for _ in range(500):
        ret, gold = random_instance(rng)
        assert abs(average_precision(ret, gold) - ap_oracle(ret, gold)) <= 1e-12


def test_ap_hand_values():
    assert average_precision(["A", "C", "B"], {"A", "B"}) == pytest.approx(0.8333, abs=1e-4)
    assert average_precision([], {"A"}) == 0.0
    assert average_precision(["A"], set()) == 0.0
    gold = {f"g{i}" for i in range(12)}
    assert average_precision([f"g{i}" for i in range(10)], gold) == 1.0


def test_ap_rejects_duplicates():
    with pytest.raises(DuplicateDocument):
        average_precision(["A", "A"], {"A"})


@given(st.lists(st.sampled_from("ABCDEFGH"), unique=True, max_size=8), st.sets(st.sampled_from("ABCDEFGH"), min_size=1))
def test_ap_bounds_and_gold_first(ret, gold):
    ap = average_precision(ret, gold)
    assert 0.0 <= ap <= 1.0
    ordered = sorted(ret, key=lambda d: d not in gold)
    assert average_precision(ordered, gold) >= ap - 1e-12


def test_map_gmap():
    m, g = map_gmap([1.0, 0.0], 0.01)
    assert m == pytest.approx(0.5)
    assert g == pytest.approx(0.1)
    with pytest.raises(EmptyInput):
        map_gmap([])
    with pytest.raises(ValueError):
        map_gmap([0.5], 0)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_gmap_le_map(aps):
    m, g = map_gmap(aps)
    assert g <= sum(max(a, 0.01) for a in aps) / len(aps) + 1e-12


def test_retrieval_eval_permutation_invariant():
    runs = {"q1": ["A", "B"], "q2": ["C"], "q3": []}
    gold = {"q1": ["A"], "q2": ["D"], "q3": ["E"]}
    a = retrieval_eval(runs, gold)
    b = retrieval_eval(dict(reversed(list(runs.items()))), dict(reversed(list(gold.items()))))
    assert a == b
    assert a.map == pytest.approx(1 / 3)
    assert a.mean_precision == pytest.approx(0.5 / 3)


def test_yesno_hand_values():
    gold = ["yes", "yes", "no", "no"]
    pred = ["yes", "no", "no", "no"]
    acc, fy, fn, macro = yesno_eval(list(zip(gold, pred)))
    assert acc == pytest.approx(0.75, abs=1e-4)
    assert fy == pytest.approx(0.6667, abs=1e-4)
    assert fn == pytest.approx(0.8, abs=1e-4)
    assert macro == pytest.approx(0.7333, abs=1e-4)


def test_factoid_hand_values():
    items = [(["HER2", "ERBB2"], ["her2 ", "x"]), (["p53"], ["a", "b", "P53"])]
    s, l, m = factoid_eval(items)
    assert (s, l) == (0.5, 1.0)
    assert m == pytest.approx((1 + 1 / 3) / 2)


def test_factoid_only_top_five_count():
    s, l, m = factoid_eval([(["x"], ["a", "b", "c", "d", "e", "x"])])
    assert (s, l, m) == (0.0, 0.0, 0.0)


def test_list_hand_values():
    p, r, f = list_eval([([["a"], ["b"], ["c"]], ["a", "b"])])
    assert p == 1.0
    assert r == pytest.approx(0.6667, abs=1e-4)
    assert f == pytest.approx(0.8)
    p, r, f = list_eval([([["a", "alpha"]], ["Alpha", "z"])])
    assert (p, r) == (0.5, 1.0)


def test_span_f1_hand_values():
    gold = {("d", 0, 5), ("d", 10, 12)}
    pred = {("d", 0, 5)}
    p, r, f = span_micro_f1(gold, pred)
    assert (p, r) == (1.0, 0.5)
    assert f == pytest.approx(0.6667, abs=1e-4)
    assert span_micro_f1(set(), set()) == (0.0, 0.0, 0.0)


def test_variance_report():
    rep = variance_report([{"map": 0.4}, {"map": 0.6}])
    assert rep["map"].mean == pytest.approx(0.5)
    assert rep["map"].stddev == pytest.approx(0.1414, abs=1e-4)
    assert (rep["map"].min, rep["map"].max) == (0.4, 0.6)
    with pytest.raises(KeyMismatch):
        variance_report([{"map": 0.4}, {"gmap": 0.6}])
    with pytest.raises(EmptyInput):
        variance_report([{"map": 0.4}])


def test_constant_runs_have_zero_spread():
    rep = variance_report([{"a": 0.3, "b": 1.0}] * 5)
    assert all(s.stddev == 0.0 for s in rep.values())


def test_gold_echo():
    gold = {"q1": ["A", "B"], "q2": ["C"]}
    ev = retrieval_eval(gold, gold)
    assert (ev.map, ev.gmap, ev.mean_f1) == (1.0, 1.0, 1.0)
    pairs = [("yes", "yes"), ("no", "no")]
    assert yesno_eval(pairs) == (1.0, 1.0, 1.0, 1.0)
    assert factoid_eval([(["x", "y"], ["x"])]) == (1.0, 1.0, 1.0)
    assert list_eval([([["a"], ["b"]], ["a", "b"])]) == (1.0, 1.0, 1.0)
    spans = {("d", 0, 3, "c")}
    assert span_micro_f1(spans, spans) == (1.0, 1.0, 1.0)


def test_format_table():
    out = format_table({"map": 0.5, "gmap": 0.1})
    assert out.splitlines()[2].startswith("gmap")
    assert "0.5000" in out
    assert format_table({}) == ""
