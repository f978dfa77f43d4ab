import functools
import json
import random

import pytest
from conftest import gateway_for, scripted
from hypothesis import given, settings, strategies as st

from bioqa import prompts
from bioqa.errors import MissingColumn, PreconditionError
from bioqa.medproc import (
    FewShotExample,
    GazetteerEntry,
    Linker,
    Mention,
    extract_procedures,
    index_document,
    levenshtein,
    link_mentions,
    load_examples,
    load_gazetteer,
    locate,
    ner_exchange,
    read_ner_tsv,
    stem,
    write_el_tsv,
    write_index_tsv,
    write_ner_tsv,
)


def oracle(a: str, b: str) -> int:
    """Edit distance by memoised recursion over suffixes, independent of the row DP."""

    @functools.lru_cache(maxsize=None)
    def d(i: int, j: int) -> int:
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        if a[i] == b[j]:
            return d(i + 1, j + 1)
        return 1 + min(d(i + 1, j), d(i, j + 1), d(i + 1, j + 1))

    return d(0, 0)


def entry(code, term):
    return GazetteerEntry(code, term, "procedure", stem(term))


EXAMPLES = [FewShotExample(f"texto {i}", (f"proc {i}",)) for i in range(3)]


def test_stem():
    assert stem("tomografías computarizadas") == "tomograf computariz"
    assert stem("  TAC   Abdominal ") == stem("tac abdominal")
    assert stem("") == ""


def test_levenshtein_examples():
    assert levenshtein("kitten", "sitting") == 3
    assert oracle("kitten", "sitting") == 3
    assert levenshtein("", "abc") == 3
    assert levenshtein("abc", "abc") == 0
    assert levenshtein("flaw", "lawn") == 2


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="abcñé ", max_size=12), st.text(alphabet="abcñé ", max_size=12))
def test_levenshtein_matches_oracle(a, b):
    assert levenshtein(a, b) == oracle(a, b)


def test_levenshtein_metric_axioms():
    rng = random.Random(3)
    word = lambda: "".join(rng.choice("abcd") for _ in range(rng.randint(0, 8)))  # noqa: E731
    for _ in range(300):
        a, b, c = word(), word(), word()
        assert levenshtein(a, a) == 0
        assert levenshtein(a, b) == levenshtein(b, a)
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


def test_gazetteer_filters_procedures(fixtures):
    gaz = load_gazetteer(fixtures / "gazetteer.tsv")
    assert {e.code for e in gaz} >= {"169070004", "86273004"}
    assert "386661006" not in {e.code for e in gaz}
    assert all(e.semantic_tag.lower() == "procedure" for e in gaz)


def test_gazetteer_missing_column(tmp_path):
    p = tmp_path / "g.tsv"
    p.write_text("code\tterm\n1\tbiopsia\n", encoding="utf-8")
    with pytest.raises(MissingColumn):
        load_gazetteer(p)
    p.write_text("id\tname\ttag\n1\tbiopsia\tProcedure\n", encoding="utf-8")
    gaz = load_gazetteer(p, {"code": "id", "term": "name", "semantic_tag": "tag"})
    assert [e.code for e in gaz] == ["1"]


def test_link_exact_and_threshold():
    lk = Linker([entry("1", "biopsia hepática"), entry("2", "craneotomía")], threshold=0.25)
    assert lk.link("Biopsias hepáticas") == "1"
    assert lk.link("craneotomias") == "2"
    assert lk.link("electrocardiograma") is None
    assert Linker([entry("2", "craneotomía")], threshold=1.0).link("electrocardiograma") == "2"


def test_link_tie_break_prefers_smaller_code():
    lk = Linker([entry("9", "abcd"), entry("3", "abce")], threshold=0.5)
    assert lk.best("abcf") == ("3", 0.25, 1)


def test_link_threshold_monotone():
    gaz = [entry(str(i), t) for i, t in enumerate(["biopsia", "ecografía", "radiografía de tórax", "hemocultivo"])]
    rng = random.Random(5)
    mentions = ["".join(rng.choice("abcdefghio ") for _ in range(rng.randint(3, 15))) for _ in range(50)]
    for m in mentions:
        linked = [Linker(gaz, t).link(m) is not None for t in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)]
        assert linked == sorted(linked)


def test_linker_preconditions():
    with pytest.raises(PreconditionError):
        Linker([])
    with pytest.raises(PreconditionError):
        Linker([entry("1", "x")], threshold=1.5)


def test_locate_offsets():
    doc = "Paciente con un TAC abdominal."
    (m,) = locate("d", doc, ["TAC abdominal"])
    assert (m.start, m.end, m.text) == (16, 29, "TAC abdominal")
    doc2 = "Se realizó TAC abdominal."
    (m2,) = locate("d", doc2, ["tac abdominal"])
    assert m2.start == 11 and doc2[m2.start : m2.end] == m2.text


def test_locate_all_occurrences_and_skips():
    doc = "ecografía abdominal; luego otra Ecografía abdominal."
    ms = locate("d", doc, ["ecografía abdominal", "ECOGRAFÍA ABDOMINAL", "inexistente", "", "a\tb"])
    assert [(m.start, m.end) for m in ms] == [(0, 19), (32, 51)]
    assert all(doc[m.start : m.end] == m.text for m in ms)


def test_ner_exchange_layout():
    ex = ner_exchange("gpt-4", "Documento.", EXAMPLES)
    roles = [m.role for m in ex.messages]
    assert roles == ["system", "user", "assistant", "user", "assistant", "user", "assistant", "user"]
    assert ex.messages[0].content == prompts.MEDPROCNER_SYSTEM
    assert ex.messages[2].content == '["proc 0"]'
    assert ex.messages[-1].content == prompts.medproc_final("Documento.")
    assert json.dumps(["ecografía"]) == prompts.medproc_example_output(["ecografía"])


def test_extract_procedures():
    doc = "Se realizó TAC abdominal y luego biopsia. La biopsia confirmó."
    gw = gateway_for(scripted(("Extraiga", '["TAC abdominal", "biopsia", "resección"]')))
    ms = extract_procedures(gw, "gpt-4", "caso", doc, EXAMPLES)
    assert [m.text for m in ms] == ["TAC abdominal", "biopsia", "biopsia"]
    assert all(doc[m.start : m.end] == m.text for m in ms)
    with pytest.raises(PreconditionError):
        extract_procedures(gw, "gpt-4", "caso", doc, EXAMPLES[:2])


def test_index_and_tsv_round_trip(tmp_path):
    lk = Linker([entry("86273004", "biopsia"), entry("169070004", "TAC de abdomen")])
    doc = "biopsia y biopsia y TAC abdominal"
    ms = link_mentions(locate("d1", doc, ["biopsia", "TAC abdominal"]), lk)
    codes = index_document(ms)
    assert codes == sorted(set(codes))
    assert "86273004" in codes
    write_ner_tsv(ms, tmp_path / "ner.tsv")
    write_el_tsv(ms, tmp_path / "el.tsv")
    write_index_tsv({"d1": codes, "d0": []}, tmp_path / "idx.tsv")
    back = read_ner_tsv(tmp_path / "el.tsv")
    assert back == ms
    assert all(doc[m.start : m.end] == m.text for m in read_ner_tsv(tmp_path / "ner.tsv"))
    lines = (tmp_path / "idx.tsv").read_text(encoding="utf-8").splitlines()
    assert lines == ["filename\tcodes", "d0\t", "d1\t" + "+".join(codes)]


def test_mention_invariants():
    with pytest.raises(ValueError):
        Mention("d", 3, 3, "")
    with pytest.raises(ValueError):
        Mention("d", 0, 4, "abc")


def test_load_examples(fixtures):
    ex = load_examples(fixtures / "medproc_examples.json")
    assert len(ex) == 3
    assert all(isinstance(e.output_procedures, tuple) for e in ex)
