import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atmlab.evaluation import em, f1, normalize_answer, subspan_em
from atmlab.util import AtmError

# Hand-computed (prediction, golds, em, subspan_em, f1) fixture.
METRIC_CASES = [
    ("Padmé Amidala", ["Padmé Amidala"], 1, 1, 1.0),
    ("Queen Padmé Amidala", ["Padmé Amidala"], 0, 1, 0.8),
    ("the 2024", ["2024"], 1, 1, 1.0),
    ("Queen Padmé", ["Padmé Amidala"], 0, 0, 0.5),
    ("Amidala Padmé", ["Padmé Amidala"], 0, 0, 1.0),
    ("", ["2024"], 0, 0, 0.0),
    ("2024", ["2024", "year 2024"], 1, 1, 1.0),
    ("year 2024", ["2024"], 0, 1, 2 / 3),
    ("The Eiffel Tower!", ["eiffel tower"], 1, 1, 1.0),
    ("eiffel", ["eiffel tower"], 0, 0, 2 / 3),
    ("an apple", ["apple"], 1, 1, 1.0),
    ("apple pie", ["apple", "pie"], 0, 1, 2 / 3),
    ("march 1912", ["march 1912"], 1, 1, 1.0),
    ("march 1912 march", ["march 1912"], 0, 1, 0.8),
    ("a b c d", ["c"], 0, 1, 0.5),
    ("x y z", ["p q"], 0, 0, 0.0),
    ("The", ["the"], 1, 1, 1.0),
    ("", [""], 1, 1, 1.0),
    ("x", [""], 0, 0, 0.0),
    ("", ["x"], 0, 0, 0.0),
    ("bold river endures", ["bold river endures"], 1, 1, 1.0),
    ("the bold river endures", ["bold river endures"], 1, 1, 1.0),
    ("bold river", ["bold river endures"], 0, 0, 0.8),
    ("silver", ["iron"], 0, 0, 0.0),
    ("iron and silver", ["iron"], 0, 1, 0.5),
    ("Iron", ["iron"], 1, 1, 1.0),
    ("iron.", ["iron"], 1, 1, 1.0),
    ("baker", ["baker", "smith"], 1, 1, 1.0),
    ("smith baker", ["baker", "smith"], 0, 1, 2 / 3),
    ("padmé  amidala", ["Padmé Amidala"], 1, 1, 1.0),
]


def test_fixture_has_thirty_cases():
    assert len(METRIC_CASES) == 30


@pytest.mark.parametrize("pred,golds,want_em,want_sub,want_f1", METRIC_CASES)
def test_metric_fixture(pred, golds, want_em, want_sub, want_f1):
    assert em(pred, golds) == want_em
    assert subspan_em(pred, golds) == want_sub
    assert f1(pred, golds) == pytest.approx(want_f1, abs=1e-12)


def test_normalize_examples():
    assert normalize_answer("The Eiffel Tower!") == ["eiffel", "tower"]
    assert normalize_answer("") == []
    assert normalize_answer("Padmé  Amidala") == ["padmé", "amidala"]


def test_empty_golds_rejected():
    for fn in (em, subspan_em, f1):
        with pytest.raises(AtmError):
            fn("x", [])


@pytest.mark.parametrize("pred,golds,_e,_s,_f", METRIC_CASES)
def test_em_implies_subspan_and_f1(pred, golds, _e, _s, _f):
    if em(pred, golds) == 1:
        assert subspan_em(pred, golds) == 1
        assert f1(pred, golds) == 1.0
    assert em(pred, golds) <= subspan_em(pred, golds)


@given(st.permutations(["iron", "silver smith", "bold river endures", "2024"]))
@settings(max_examples=20, deadline=None)
def test_gold_order_invariance(golds):
    pred = "the silver smith"
    ordered = list(golds)
    baseline = sorted(ordered)
    assert em(pred, ordered) == em(pred, baseline)
    assert subspan_em(pred, ordered) == subspan_em(pred, baseline)
    assert f1(pred, ordered) == f1(pred, baseline)


@given(st.text(alphabet="aB 2,.!?", max_size=24))
@settings(max_examples=60, deadline=None)
def test_case_punct_invariance(raw):
    golds = ["ab 2"]
    assert em(raw, golds) == em(raw.upper(), golds)
    assert subspan_em(raw, golds) == subspan_em(raw.upper(), golds)
    assert f1(raw, golds) == f1(raw.upper(), golds)
    assert em(raw, golds) <= subspan_em(raw, golds)
