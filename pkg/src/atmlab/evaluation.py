"""Attacked-benchmark construction and every reported measurement: strict exact
match, subspan exact match, token-overlap F1, fabrication-count sweeps, answer
log-loss densities over preference populations, and recall-versus-accuracy curves.
"""
from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .attacker import build_attacked_list, fabricate, rule_fabrications
from .corpus import Document, QaInstance, World, find_value_span
from .encoding import TASK_ONE, TASK_RAG, qa_prompt_seq, qa_seq
from .model import ModelParams, answer_log_prob, sample_batch
from .retrieval import Retriever, recall_at_k
from .util import AtmError, SizingError, parallel_map, subrng
from .vocab import decode_ids

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> list[str]:
    """Lowercase, strip punctuation, drop articles, collapse whitespace, split."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return text.split()


def _require_golds(golds: list[str]) -> None:
    if not golds:
        raise AtmError("empty gold answer list")


def em(prediction: str, golds: list[str]) -> int:
    """Strict exact match after normalization."""
    _require_golds(golds)
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def subspan_em(prediction: str, golds: list[str]) -> int:
    """1 iff some normalized gold occurs contiguously inside the normalized prediction."""
    _require_golds(golds)
    pred = normalize_answer(prediction)
    for g in golds:
        gt = normalize_answer(g)
        if not gt:
            continue
        if any(pred[i:i + len(gt)] == gt for i in range(len(pred) - len(gt) + 1)):
            return 1
    # an empty gold matches only an empty prediction (equality case)
    return int(any(not normalize_answer(g) and not pred for g in golds))


def f1(prediction: str, golds: list[str]) -> float:
    """Max over golds of token-multiset overlap F1."""
    _require_golds(golds)
    pred = normalize_answer(prediction)
    best = 0.0
    for g in golds:
        gt = normalize_answer(g)
        if not pred and not gt:
            best = max(best, 1.0)
            continue
        common = Counter(pred) & Counter(gt)
        same = sum(common.values())
        if same == 0:
            continue
        precision = same / len(pred)
        recall = same / len(gt)
        best = max(best, 2 * precision * recall / (precision + recall))
    return best


# ----------------------------- benchmarks -----------------------------


@dataclass(frozen=True)
class BenchmarkItem:
    qid: str
    question: str
    answer: str
    doc_texts: tuple[str, ...]
    provenance: tuple[str, ...]


class RuleFabricator:
    """Fixed benchmark attack: entity swaps of each query's golden document."""

    name = "rule"

    def __init__(self, world: World):
        self.world = world
        self.cache_key = f"rule:{world.seed}" 

    def make(self, q: QaInstance, retriever: Retriever, n: int,
             rng: np.random.Generator) -> list[Document]:
        golden = retriever.by_id[q.golden_doc_id]
        return rule_fabrications(golden, self.world, n, rng, qid=q.qid)


class ModelFabricator:
    """Attack with a learned attacker checkpoint; example is the top-ranked document."""

    name = "model"

    def __init__(self, params: ModelParams, temperature: float = 0.8,
                 top_p: float = 0.95, max_new: int = 20,
                 cache_key: str | None = None):
        self.params = params
        self.temperature = temperature
        self.top_p = top_p
        self.max_new = max_new
        self.cache_key = cache_key

    def make(self, q: QaInstance, retriever: Retriever, n: int,
             rng: np.random.Generator) -> list[Document]:
        example = retriever.docs_for(retriever.retrieve(q, 1))[0]
        return fabricate(self.params, q, example, max(n, 2), rng,
                         self.temperature, self.top_p, self.max_new)[:n]


_BENCH_CACHE: dict[tuple, list] = {}


def cached_benchmark(test_split, retriever, fabricator, k_ret, k_fab, seed,
                     workers=None):
    """build_benchmark with per-process memoization (builds are deterministic)."""
    key = (getattr(fabricator, "cache_key", None) if fabricator else "clean",
           k_ret, k_fab, seed, len(test_split), id(retriever))
    if None in key:
        return build_benchmark(test_split, retriever, fabricator, k_ret, k_fab,
                               seed, workers)
    if key not in _BENCH_CACHE:
        _BENCH_CACHE[key] = build_benchmark(test_split, retriever, fabricator,
                                            k_ret, k_fab, seed, workers)
    return _BENCH_CACHE[key]


def build_benchmark(test_split: list[QaInstance], retriever: Retriever, fabricator,
                    k_ret: int, k_fab: int, seed: int,
                    workers: int | None = None) -> list[BenchmarkItem]:
    """Per query: top-k_ret retrieved plus k_fab fabricated documents, permuted.

    Per-query randomness is derived from (seed, k_ret, k_fab, qid) so identical
    arguments rebuild identical files regardless of call order or worker count.
    """
    if k_ret + k_fab < 1:
        raise SizingError("benchmark needs at least one document per query")
    if k_ret > len(retriever.store):
        raise SizingError(f"k_ret={k_ret} exceeds store size {len(retriever.store)}")

    def one(q: QaInstance) -> BenchmarkItem:
        rng = subrng(seed, "bench", k_ret, k_fab, q.qid)
        retrieved = retriever.docs_for(retriever.retrieve(q, k_ret)) if k_ret else []
        fabs = fabricator.make(q, retriever, k_fab, rng) if k_fab else []
        union = list(retrieved) + list(fabs)
        if fabs:
            attacked = build_attacked_list(retrieved, fabs, rng)
            docs, prov = attacked.docs, attacked.provenance
        else:
            perm = rng.permutation(len(union))
            docs = tuple(union[int(i)] for i in perm)
            prov = tuple(d.origin for d in docs)
        return BenchmarkItem(q.qid, q.question, q.answer,
                             tuple(d.text for d in docs), prov)

    return parallel_map(one, test_split, workers)


# ----------------------------- generator evaluation -----------------------------


@dataclass
class MetricsReport:
    em: float
    subspan_em: float
    f1: float
    n: int
    per_query: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"em": self.em, "subspan_em": self.subspan_em, "f1": self.f1, "n": self.n}


def greedy_answers(params: ModelParams, items: list[BenchmarkItem],
                   max_new: int = 6, batch_size: int = 64) -> list[str]:
    """Deterministic argmax decoding of the answer span for every item."""
    preds: list[str] = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        prompts = [qa_prompt_seq(i.question, list(i.doc_texts), TASK_RAG) for i in chunk]
        tokens = sample_batch(params, prompts, max_new, 0.0, 1.0, None)
        preds.extend(decode_ids(t) for t in tokens)
    return preds


def score_predictions(items: list[BenchmarkItem], predictions: list[str]) -> MetricsReport:
    if len(items) != len(predictions):
        raise AtmError("prediction count does not match benchmark size")
    rows = []
    for item, pred in zip(items, predictions):
        golds = [item.answer]
        rows.append({
            "qid": item.qid,
            "prediction": pred,
            "em": em(pred, golds),
            "subspan_em": subspan_em(pred, golds),
            "f1": f1(pred, golds),
        })
    n = len(rows)
    return MetricsReport(
        em=sum(r["em"] for r in rows) / n,
        subspan_em=sum(r["subspan_em"] for r in rows) / n,
        f1=sum(r["f1"] for r in rows) / n,
        n=n,
        per_query=rows,
    )


def evaluate_generator(params: ModelParams, items: list[BenchmarkItem],
                       max_new: int = 6) -> MetricsReport:
    return score_predictions(items, greedy_answers(params, items, max_new))


def scripted_copy_predictions(items: list[BenchmarkItem]) -> list[str]:
    """Baseline that parrots the value span of the first document in each list."""
    out = []
    for item in items:
        tokens = item.doc_texts[0].split()
        _, start, end = find_value_span(tokens)
        out.append(" ".join(tokens[start:end]))
    return out


def copy_baseline_hit_rate(items: list[BenchmarkItem]) -> float:
    """Expected accuracy of copying a uniformly random document's value span.

    Deterministic oracle for fabrication sweeps: fabrications never carry the
    answer, so the rate can only fall as they displace retrieved documents.
    """
    per_query = []
    for item in items:
        hits = 0
        for text in item.doc_texts:
            tokens = text.split()
            _, start, end = find_value_span(tokens)
            hits += int(subspan_em(" ".join(tokens[start:end]), [item.answer]))
        per_query.append(hits / len(item.doc_texts))
    return float(np.mean(per_query))


# ----------------------------- analyses -----------------------------


def sweep_fab_count(params: ModelParams, test_split: list[QaInstance],
                    retriever: Retriever, fabricator, total: int, seed: int,
                    max_new: int = 6) -> list[dict]:
    """Metrics at every fabrication count 0..total-1 with the list size held fixed."""
    if total < 1:
        raise SizingError("sweep needs total >= 1")
    rows = []
    for n_fab in range(total):
        items = cached_benchmark(test_split, retriever, fabricator,
                                 total - n_fab, n_fab, seed)
        report = evaluate_generator(params, items, max_new)
        rows.append({"n_fab": n_fab, "n_ret": total - n_fab, **report.to_dict()})
    return rows


def answer_log_loss(params: ModelParams, question: str, doc_text: str,
                    answer: str) -> float:
    """Mean answer negative log-likelihood with one document as context (ln PPL)."""
    seq = qa_seq(question, [doc_text], answer, TASK_ONE)
    span = int(seq.loss_mask.sum())
    return -answer_log_prob(params, seq) / span


def log_loss_density(params: ModelParams, pairs, answer_by_qid: dict[str, str],
                     bins: int = 20) -> dict:
    """Histogram densities of answer log loss under win vs lose fabrication contexts."""
    if not pairs:
        raise SizingError("no preference pairs to analyze")
    win_losses, lose_losses = [], []
    for p in pairs:
        answer = answer_by_qid[p.qid]
        win_losses.append(answer_log_loss(params, p.question, p.win.text, answer))
        lose_losses.append(answer_log_loss(params, p.question, p.lose.text, answer))
    win_arr = np.array(win_losses)
    lose_arr = np.array(lose_losses)
    lo = float(min(win_arr.min(), lose_arr.min()))
    hi = float(max(win_arr.max(), lose_arr.max()))
    if hi <= lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    win_hist, _ = np.histogram(win_arr, bins=edges, density=True)
    lose_hist, _ = np.histogram(lose_arr, bins=edges, density=True)
    return {
        "bin_edges": edges.tolist(),
        "win_density": win_hist.tolist(),
        "lose_density": lose_hist.tolist(),
        "win_mean": float(win_arr.mean()),
        "lose_mean": float(lose_arr.mean()),
        "n_pairs": len(pairs),
    }


def recall_accuracy_curve(params: ModelParams, test_split: list[QaInstance],
                          retriever: Retriever, ks: list[int], seed: int,
                          max_new: int = 6) -> list[dict]:
    """Paired golden-document recall and answer accuracy as the list grows."""
    rows = []
    for k in ks:
        if k < 1:
            raise SizingError("k range must start at 1 or above")
        items = build_benchmark(test_split, retriever, None, k, 0, seed)
        report = evaluate_generator(params, items, max_new)
        rows.append({
            "k": k,
            "recall": recall_at_k(test_split, retriever, k),
            "subspan_em": report.subspan_em,
            "em": report.em,
            "f1": report.f1,
        })
    return rows
