import pytest

from atmlab.corpus import Document, QaInstance
from atmlab.retrieval import Retriever, recall_at_k
from atmlab.util import SizingError


def test_disjoint_tokens_score_zero(small_retriever, small_corpus):
    doc = small_retriever.store[0]
    assert small_retriever.score_text("<res000> <res001>", doc) == 0.0


def test_query_equal_to_doc_is_maximal(small_retriever):
    # brute force: a document's own text must score at least as high as any other doc
    for doc in small_retriever.store[:12]:
        own = small_retriever.score_text(doc.text, doc)
        assert all(small_retriever.score_text(doc.text, other) <= own + 1e-12
                   for other in small_retriever.store)


def test_doubling_matching_term_does_not_decrease_score():
    store = [
        Document("d0", "the banner of baba is azure", "retrieved"),
        Document("d1", "the banner of love is teal", "retrieved"),
    ]
    ret = Retriever(store)
    base = ret.score_text("what color is the banner of baba", store[0])
    doubled = Document("d0b", "the banner banner of baba is azure", "retrieved")
    assert ret.score_text("what color is the banner of baba", doubled) >= base - 1e-12


def test_score_invariant_to_query_token_order(small_retriever, small_corpus):
    instances, _ = small_corpus
    q = instances[0].question
    reversed_q = " ".join(reversed(q.split()))
    for doc in small_retriever.store[:8]:
        assert small_retriever.score_text(q, doc) == pytest.approx(
            small_retriever.score_text(reversed_q, doc), abs=1e-12)


def test_retrieve_full_store_is_permutation(small_retriever, small_corpus):
    instances, docs = small_corpus
    ranked = small_retriever.retrieve(instances[0], len(docs))
    assert sorted(ranked.doc_ids()) == sorted(d.doc_id for d in docs)


def test_retrieve_scores_non_increasing(small_retriever, small_corpus):
    instances, _ = small_corpus
    for inst in instances[:10]:
        ranked = small_retriever.retrieve(inst, 10)
        scores = [s for _, s in ranked.entries]
        assert scores == sorted(scores, reverse=True)
        assert len(set(ranked.doc_ids())) == len(ranked.doc_ids())


def test_retrieve_tie_break_ascending_doc_id(small_retriever, small_corpus):
    instances, _ = small_corpus
    for inst in instances[:10]:
        ranked = small_retriever.retrieve(inst, len(small_retriever.store))
        for (id_a, s_a), (id_b, s_b) in zip(ranked.entries, ranked.entries[1:]):
            if s_a == s_b:
                assert id_a < id_b


def test_retrieve_k_too_large(small_retriever, small_corpus):
    instances, docs = small_corpus
    with pytest.raises(SizingError):
        small_retriever.retrieve(instances[0], len(docs) + 1)


def test_retrieve_deterministic(small_retriever, small_corpus):
    instances, _ = small_corpus
    a = small_retriever.retrieve(instances[3], 7)
    b = small_retriever.retrieve(instances[3], 7)
    assert a == b


def test_recall_monotone_in_k(small_retriever, small_corpus):
    instances, _ = small_corpus
    values = [recall_at_k(instances, small_retriever, k) for k in range(1, 11)]
    assert all(lo <= hi for lo, hi in zip(values, values[1:]))


def test_recall_full_store_is_one(small_retriever, small_corpus):
    instances, docs = small_corpus
    assert recall_at_k(instances, small_retriever, len(docs)) == 1.0


def test_recall_k_zero_rejected(small_retriever, small_corpus):
    instances, _ = small_corpus
    with pytest.raises(SizingError):
        recall_at_k(instances, small_retriever, 0)


def test_empty_store_rejected():
    with pytest.raises(SizingError):
        Retriever([])
