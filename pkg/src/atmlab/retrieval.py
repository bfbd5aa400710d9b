"""Lexical retrieval over the document store.

Scoring is idf-squared weighted term overlap: each query term contributes
query_count(term) * idf(term)^2 when the document contains the term at all.
Document-side counts are capped at presence so stuffing a term cannot demote a
document that already matches, and a query scored against its own text is maximal.
Idf uses add-one document-frequency smoothing with natural logs.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .corpus import Document, QaInstance
from .util import SizingError


@dataclass(frozen=True)
class RankedList:
    """Top-k retrieval result; scores non-increasing, doc_ids unique."""

    query_id: str
    entries: tuple[tuple[str, float], ...]

    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]


class Retriever:
    """Immutable index over a store; safe for any number of concurrent readers."""

    def __init__(self, store: list[Document]):
        if not store:
            raise SizingError("empty document store")
        self.store = list(store)
        self.by_id = {d.doc_id: d for d in self.store}
        if len(self.by_id) != len(self.store):
            raise SizingError("duplicate doc_id in store")
        self._doc_terms = [set(d.tokens()) for d in self.store]
        df = Counter(t for terms in self._doc_terms for t in terms)
        n = len(self.store)
        self._idf = {t: math.log((1.0 + n) / (1.0 + c)) + 1.0 for t, c in df.items()}

    def score_text(self, query_text: str, doc: Document) -> float:
        """Overlap score >= 0; invariant to query token order."""
        if not query_text.split() or not doc.tokens():
            return 0.0
        terms = set(doc.tokens())
        score = 0.0
        for term, cnt in Counter(query_text.split()).items():
            if term in terms:
                idf = self._idf.get(term, math.log(1.0 + len(self.store)) + 1.0)
                score += cnt * idf * idf
        return score

    def retrieve(self, query: QaInstance, k: int) -> RankedList:
        """Top-k by score, ties broken by ascending doc_id."""
        if k < 1:
            raise SizingError(f"k must be >= 1, got {k}")
        if k > len(self.store):
            raise SizingError(f"k={k} exceeds store size {len(self.store)}")
        scored = sorted(
            ((d.doc_id, self.score_text(query.question, d)) for d in self.store),
            key=lambda pair: (-pair[1], pair[0]),
        )
        return RankedList(query.qid, tuple(scored[:k]))

    def docs_for(self, ranked: RankedList) -> list[Document]:
        return [self.by_id[i] for i in ranked.doc_ids()]


def recall_at_k(dataset: list[QaInstance], retriever: Retriever, k: int) -> float:
    """Fraction of questions whose golden document lands in the top k."""
    if k < 1:
        raise SizingError(f"k must be >= 1, got {k}")
    if not dataset:
        raise SizingError("empty dataset")
    hits = 0
    for q in dataset:
        if q.golden_doc_id in retriever.retrieve(q, k).doc_ids():
            hits += 1
    return hits / len(dataset)
