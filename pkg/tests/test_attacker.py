import numpy as np
import pytest

from atmlab.attacker import (AttackedList, PreferencePair, build_attacked_list,
                             fabricate, load_pairs, permute, rule_fabrications,
                             save_pairs, score_fabrications, select_pair)
from atmlab.corpus import Document
from atmlab.encoding import TASK_ONE, qa_seq
from atmlab.model import init_params, perplexity
from atmlab.util import AtmError, SamplingError, SizingError, subrng
from atmlab.vocab import VOCAB_SIZE

from conftest import random_seq


def _docs(n, origin="retrieved"):
    from atmlab.vocab import COLORS, YEARS
    return [Document(f"d{i}", f"the banner of baba is {COLORS[i % len(COLORS)]} "
                              f"{YEARS[i % len(YEARS)]}", origin)
            for i in range(n)]


def test_permute_singleton_identity():
    out = permute(_docs(1), subrng(0, "p"))
    assert out.permutation == (0,)
    assert len(out.docs) == 1


def test_permute_preserves_multiset():
    docs = _docs(7)
    out = permute(docs, subrng(1, "p"))
    assert sorted(d.doc_id for d in out.docs) == sorted(d.doc_id for d in docs)
    assert out.unpermuted() == docs


def test_permute_uniform_over_orders():
    """All 6 orders of a 3-element list appear with frequency 1/6 within 0.02."""
    docs = _docs(3)
    rng = subrng(2, "chi")
    counts = {}
    n = 10_000
    for _ in range(n):
        out = permute(docs, rng)
        counts[out.permutation] = counts.get(out.permutation, 0) + 1
    assert len(counts) == 6
    for order, c in counts.items():
        assert abs(c / n - 1 / 6) < 0.02, (order, c)


def test_build_attacked_list_sizes():
    retrieved, fabs = _docs(5), _docs(5, "fabricated")
    out = build_attacked_list(retrieved, fabs, subrng(3, "b"))
    assert len(out.docs) == 10
    assert sorted(out.provenance) == ["fabricated"] * 5 + ["retrieved"] * 5


def test_build_attacked_list_requires_fabs():
    with pytest.raises(SizingError):
        build_attacked_list(_docs(3), [], subrng(4, "b"))


def test_build_attacked_list_multiset_many_cases():
    rng = subrng(5, "cases")
    for case in range(1000):
        n_r = int(rng.integers(0, 6))
        n_f = int(rng.integers(1, 6))
        retrieved, fabs = _docs(n_r), _docs(n_f, "fabricated")
        out = build_attacked_list(retrieved, fabs, rng)
        union = retrieved + fabs
        assert sorted(d.doc_id + d.origin for d in out.docs) == \
            sorted(d.doc_id + d.origin for d in union)
        # the permutation record inverts the shuffle back to the concatenation
        assert out.unpermuted() == union


def test_select_pair_examples(small_corpus):
    instances, docs = small_corpus
    q = instances[0]
    example = docs[0]
    fabs = _docs(3, "fabricated")
    assert select_pair(q, example, fabs[:2], [3.0, 1.5]).win.doc_id == "d0"
    assert select_pair(q, example, fabs[:2], [3.0, 1.5]).lose.doc_id == "d1"
    assert select_pair(q, example, fabs[:2], [2.0, 2.0]) is None
    pair = select_pair(q, example, fabs, [1.2, 9.7, 3.3])
    assert pair.win.doc_id == "d1" and pair.lose.doc_id == "d0"
    with pytest.raises(AtmError):
        select_pair(q, example, fabs, [1.0, 2.0])
    with pytest.raises(SizingError):
        select_pair(q, example, fabs[:1], [1.0])


def test_preference_pair_invariants():
    a, b = _docs(2, "fabricated")
    with pytest.raises(AtmError):
        PreferencePair("q0", "q", "ex", a, b, 1.0, 1.0)
    with pytest.raises(AtmError):
        PreferencePair("q0", "q", "ex", a, a, 2.0, 1.0)
    pair = PreferencePair("q0", "what color is the banner of baba",
                          "the banner of baba is azure", a, b, 2.0, 1.0)
    enc = pair.encode()
    assert int(enc.win.loss_mask.sum()) > 0


def test_score_fabrications_matches_perplexity_exactly(small_corpus, full_dims):
    instances, docs = small_corpus
    params = init_params(17, full_dims)
    q = instances[0]
    fabs = [Document(f"f{i}", docs[i].text, "fabricated") for i in range(4)]
    rewards = score_fabrications(params, q, q.answer, fabs)
    assert all(r >= 1.0 for r in rewards)
    for fab, reward in zip(fabs, rewards):
        direct = perplexity(params, qa_seq(q.question, [fab.text], q.answer, TASK_ONE))
        assert reward == direct
    # per-candidate independence: scoring order cannot matter
    assert score_fabrications(params, q, q.answer, fabs[::-1]) == rewards[::-1]


def test_fabricate_deterministic_and_filtered(small_corpus, full_dims):
    instances, docs = small_corpus
    params = init_params(23, full_dims)
    q = instances[0]
    example = docs[0]
    a = fabricate(params, q, example, 2, subrng(7, "fab"), max_new=8)
    b = fabricate(params, q, example, 2, subrng(7, "fab"), max_new=8)
    assert [d.text for d in a] == [d.text for d in b]
    assert all(d.origin == "fabricated" for d in a)
    assert all(d.text and d.text != example.text for d in a)
    with pytest.raises(SizingError):
        fabricate(params, q, example, 1, subrng(7, "fab"))


def test_fabricate_outputs_never_copy_example(small_corpus, full_dims):
    """String-equality filter over a larger sampled run."""
    instances, docs = small_corpus
    params = init_params(23, full_dims)
    rng = subrng(8, "bulk")
    total = 0
    for rep in range(125):
        q = instances[rep % len(instances)]
        example = docs[rep % len(docs)]
        fabs = fabricate(params, q, example, 4, rng, max_new=6)
        for d in fabs:
            assert d.text != example.text
            total += 1
    assert total == 500


def test_rule_fabrications_distinct_values(small_world, small_corpus):
    instances, docs = small_corpus
    by_id = {d.doc_id: d for d in docs}
    golden = by_id[instances[0].golden_doc_id]
    fabs = rule_fabrications(golden, small_world, 5, subrng(9, "rf"), qid="q0")
    assert len(fabs) == 5
    assert len({d.text for d in fabs}) == 5
    assert all(d.text != golden.text for d in fabs)


def test_pairs_round_trip(tmp_path):
    a, b = _docs(2, "fabricated")
    pair = PreferencePair("q0", "which color", "ex doc", a, b, 2.5, 1.25)
    save_pairs(tmp_path / "pairs.jsonl", [pair])
    loaded = load_pairs(tmp_path / "pairs.jsonl", {"q0": "which color"}, {"q0": "ex doc"})
    assert len(loaded) == 1
    assert loaded[0].win.text == a.text
    assert loaded[0].reward_win == 2.5
    assert loaded[0].question == "which color"
