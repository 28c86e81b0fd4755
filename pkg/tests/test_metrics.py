import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from gazecxr.extract import YnAnswer
from gazecxr.metrics import (
    Cell,
    EmptySample,
    accuracy,
    assemble_report,
    ddx_score,
    lcs_length,
    rouge_l,
    tokenize,
)

from conftest import brute_force_lcs


def test_tokenize():
    assert tokenize("No acute disease.") == ["no", "acute", "disease"]
    assert tokenize("") == []
    assert tokenize("x-ray") == ["x", "ray"]


def test_lcs_examples():
    seq = list("abcde")
    assert lcs_length(seq, seq) == 5
    assert lcs_length(["a", "b"], ["c", "d"]) == 0
    assert brute_force_lcs(list("abcde"), list("ace")) == 3
    assert lcs_length(list("abcde"), list("ace")) == 3
    assert lcs_length([], ["a"]) == 0


tokens = st.lists(st.sampled_from(list("abcde")), max_size=12)


@settings(max_examples=300, deadline=None)
@given(tokens, tokens)
def test_lcs_properties(a, b):
    n = lcs_length(a, b)
    assert n == lcs_length(b, a) == brute_force_lcs(a, b)
    assert 0 <= n <= min(len(a), len(b))


def test_rouge_examples():
    s = rouge_l("the cat sat", "the cat ate")
    # oracle: enumerate subsequences of the token lists
    lcs = brute_force_lcs(["the", "cat", "sat"], ["the", "cat", "ate"])
    assert lcs == 2
    assert s.precision == pytest.approx(2 / 3, abs=1e-12)
    assert s.recall == pytest.approx(2 / 3, abs=1e-12)
    assert s.f1 == pytest.approx(2 / 3, abs=1e-12)
    assert rouge_l("No acute disease.", "no acute disease") == rouge_l("x", "x")
    assert (rouge_l("x", "x").f1, rouge_l("", "abc").f1, rouge_l("abc", "").f1) == (1.0, 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abc XY.,-", max_size=40))
def test_rouge_identity_and_invariance(text):
    if not tokenize(text):
        assert rouge_l(text, text).f1 == 0
        return
    assert rouge_l(text, text).f1 == 1.0
    assert rouge_l(f"  {text.upper()}\n", text) == rouge_l(text, text)


def test_ddx_examples():
    s = ddx_score([({"A"}, {"A"})])
    assert (s.precision, s.recall, s.f1) == (1, 1, 1)
    s = ddx_score([({"A", "B"}, {"A", "C"})])
    assert (s.n_correct, s.n_predicted, s.n_gold) == (1, 2, 2)
    assert (s.precision, s.recall, s.f1) == (0.5, 0.5, 0.5)
    s = ddx_score([(set(), {"A"}), (set(), {"B", "C"})])
    assert (s.precision, s.recall, s.f1) == (0, 0, 0)


def test_ddx_micro_vs_macro():
    pairs = [({"A"}, {"A"}), ({"B", "C", "D"}, {"E"})]
    micro = ddx_score(pairs)
    assert micro.precision == 1 / 4 and micro.recall == 1 / 2
    macro = ddx_score(pairs, "macro")
    assert macro.precision == (1 + 0) / 2 and macro.recall == (1 + 0) / 2
    with pytest.raises(ValueError):
        ddx_score(pairs, "weighted")


def naive_ddx(pairs):
    correct = predicted = gold = 0
    for pred, g in pairs:
        for code in pred:
            predicted += 1
            if code in g:
                correct += 1
        for _ in g:
            gold += 1
    p = correct / predicted if predicted else 0.0
    r = correct / gold if gold else 0.0
    return correct, predicted, gold, p, r, (2 * p * r / (p + r) if p + r else 0.0)


codesets = st.sets(st.sampled_from(["A", "B", "C", "D", "E", "F", "G"]), max_size=6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(codesets, codesets.filter(bool)), min_size=1, max_size=8))
def test_ddx_matches_naive_oracle(pairs):
    s = ddx_score(pairs)
    assert (s.n_correct, s.n_predicted, s.n_gold, s.precision, s.recall, s.f1) == naive_ddx(pairs)
    assert s.n_correct <= min(s.n_predicted, s.n_gold)


def test_accuracy():
    assert accuracy([(YnAnswer.YES, "Y"), (YnAnswer.NO, "N")]) == 1.0
    assert accuracy([(YnAnswer.YES, "Y"), (YnAnswer.UNPARSEABLE, "N")]) == 0.5
    assert accuracy([("The left lung.", "left lung"), ("no", "yes")]) == 0.5
    with pytest.raises(EmptySample):
        accuracy([])


def test_report_flags_improvement():
    cells = {"ERR": {"no_gaze": Cell(score=28.75, n=574), "gaze": Cell(score=71.78, n=574)},
             "VQA": {"no_gaze": Cell(score=42.16, n=5), "gaze": Cell(score=42.16, n=5)}}
    rep = assemble_report(cells, "LLaVA-v0", ["ERR", "VQA", "DDX"])
    assert rep.improved == {"ERR": True, "VQA": False, "DDX": False}
    assert rep.cells["DDX"]["gaze"].skipped and rep.cells["DDX"]["no_gaze"].skipped
    doc = json.loads(rep.to_json())
    assert doc["tasks"]["ERR"]["gaze_improved"] is True
    md = rep.to_markdown()
    assert "**71.78**" in md and "28.75" in md and "skipped" in md


def test_report_rounds_before_comparing():
    cells = {"GEN": {"no_gaze": Cell(score=10.001), "gaze": Cell(score=10.004)}}
    assert assemble_report(cells, tasks=["GEN"]).improved["GEN"] is False
