"""Adversarial agent operations: fabrication sampling, list permutation, perplexity
rewards, and preference-pair selection.

The learned attacker writes a fabricated document given (question, example document);
its candidates are rewarded by how hard they make the generator's job, measured as
the generator's answer perplexity with the single fabrication as context. A rule
fabricator (entity swap on a source document) doubles as the non-learned baseline and
as the fixed benchmark attack.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import (Document, ORIGIN_FABRICATED, QaInstance, World,
                     swap_alternatives, with_value)
from .encoding import TASK_ONE, attacker_prompt_seq, attacker_seq, qa_seq
from .model import ModelParams, perplexity, sample_batch
from .training import EncodedPair
from .util import AtmError, SamplingError, SizingError, read_jsonl, write_jsonl
from .vocab import MAX_DOC_LEN, decode_ids

FABRICATE_RETRY_BUDGET = 8


@dataclass(frozen=True)
class AttackedList:
    """Permuted union of retrieved and fabricated documents.

    permutation[i] is the index in the pre-shuffle union (retrieved then fabricated)
    of the document now sitting at slot i, so the record inverts the shuffle.
    """

    docs: tuple[Document, ...]
    permutation: tuple[int, ...]

    @property
    def provenance(self) -> tuple[str, ...]:
        return tuple(d.origin for d in self.docs)

    def unpermuted(self) -> list[Document]:
        restored: list[Document | None] = [None] * len(self.docs)
        for slot, src in enumerate(self.permutation):
            restored[src] = self.docs[slot]
        return list(restored)  # type: ignore[arg-type]


@dataclass(frozen=True)
class PreferencePair:
    """Highest- and lowest-reward fabrications for one query."""

    qid: str
    question: str
    example_text: str
    win: Document
    lose: Document
    reward_win: float
    reward_lose: float

    def __post_init__(self) -> None:
        if not self.reward_win > self.reward_lose:
            raise AtmError("preference pair needs a strictly higher win reward")
        if self.win.text == self.lose.text:
            raise AtmError("preference pair needs distinct documents")

    def encode(self) -> EncodedPair:
        return EncodedPair(
            attacker_seq(self.question, self.example_text, self.win.text),
            attacker_seq(self.question, self.example_text, self.lose.text),
        )


def fabricate(attacker_params: ModelParams, q: QaInstance, example_doc: Document,
              n_f: int, rng: np.random.Generator, temperature: float = 0.8,
              top_p: float = 0.95, max_new: int = 20) -> list[Document]:
    """Sample n_f fabricated documents from the (question, example document) prompt.

    Empty samples and verbatim copies of the example are resampled; if a slot stays
    degenerate through the retry budget the whole call fails.
    """
    if n_f < 2:
        raise SizingError(f"need n_f >= 2 fabrications for a preference pair, got {n_f}")
    prompt = attacker_prompt_seq(q.question, example_doc.text)
    texts: list[str | None] = [None] * n_f
    pending = list(range(n_f))
    for _ in range(FABRICATE_RETRY_BUDGET):
        if not pending:
            break
        tokens = sample_batch(attacker_params, [prompt] * len(pending), max_new,
                              temperature, top_p, rng)
        still = []
        for slot, toks in zip(pending, tokens):
            text = decode_ids(toks[:MAX_DOC_LEN])
            if text and text != example_doc.text:
                texts[slot] = text
            else:
                still.append(slot)
        pending = still
    if pending:
        raise SamplingError(
            f"{len(pending)} fabrication slots stayed degenerate for {q.qid} "
            f"after {FABRICATE_RETRY_BUDGET} retries")
    return [
        Document(f"fab-{q.qid}-{i}", text, ORIGIN_FABRICATED, example_doc.about_entity)
        for i, text in enumerate(texts)  # type: ignore[arg-type]
    ]


def rule_fabrications(source_doc: Document, world: World, n: int,
                      rng: np.random.Generator, qid: str = "q") -> list[Document]:
    """n entity-swap fabrications of one document, values distinct while they last."""
    attr_name, _, alternatives = swap_alternatives(source_doc, world)
    if not alternatives:
        raise SizingError(f"no alternative value for attribute {attr_name!r}")
    order = rng.permutation(len(alternatives))
    picks = [alternatives[int(order[i % len(order)])] for i in range(n)]
    return [with_value(source_doc, v, f"fab-{qid}-{i}") for i, v in enumerate(picks)]


def permute(docs: list[Document], rng: np.random.Generator) -> AttackedList:
    """Uniform random shuffle with an invertible slot-to-source record."""
    if not docs:
        raise SizingError("cannot permute an empty document list")
    perm = rng.permutation(len(docs))
    return AttackedList(tuple(docs[int(i)] for i in perm), tuple(int(i) for i in perm))


def build_attacked_list(retrieved: list[Document], fabs: list[Document],
                        rng: np.random.Generator) -> AttackedList:
    """Union of retrieved and fabricated documents, then a random permutation."""
    if not fabs:
        raise SizingError("attacked list needs at least one fabrication")
    return permute(list(retrieved) + list(fabs), rng)


def score_fabrications(generator_params: ModelParams, q: QaInstance, answer: str,
                       fabs: list[Document]) -> list[float]:
    """Reward per candidate: generator answer perplexity with that single document.

    Each candidate is scored independently (element-wise identical to calling the
    perplexity op with the one-document context), so order cannot matter.
    """
    if not fabs:
        raise SizingError("no fabrications to score")
    return [
        perplexity(generator_params, qa_seq(q.question, [d.text], answer, TASK_ONE))
        for d in fabs
    ]


def select_pair(q: QaInstance, example_doc: Document, fabs: list[Document],
                rewards: list[float]) -> PreferencePair | None:
    """argmax/argmin of the rewards; a full tie carries no signal and yields None."""
    if len(fabs) != len(rewards):
        raise AtmError(f"{len(fabs)} fabrications but {len(rewards)} rewards")
    if len(fabs) < 2:
        raise SizingError("need at least two candidates to form a pair")
    arr = np.asarray(rewards, dtype=np.float64)
    hi = int(np.argmax(arr))
    lo = int(np.argmin(arr))
    if arr[hi] == arr[lo]:
        return None
    return PreferencePair(q.qid, q.question, example_doc.text,
                          fabs[hi], fabs[lo], float(arr[hi]), float(arr[lo]))


# ----------------------------- persistence -----------------------------


def save_pairs(path: str, pairs: list[PreferencePair]) -> None:
    write_jsonl(path, ({
        "qid": p.qid,
        "win_text": p.win.text,
        "lose_text": p.lose.text,
        "reward_win": p.reward_win,
        "reward_lose": p.reward_lose,
    } for p in pairs))


def load_pairs(path: str, question_by_qid: dict[str, str],
               example_by_qid: dict[str, str]) -> list[PreferencePair]:
    """Rebuild pairs from the audit log plus the deterministic per-query context."""
    out = []
    for i, r in enumerate(read_jsonl(path)):
        qid = r["qid"]
        out.append(PreferencePair(
            qid, question_by_qid[qid], example_by_qid[qid],
            Document(f"fab-{qid}-win-{i}", r["win_text"], ORIGIN_FABRICATED),
            Document(f"fab-{qid}-lose-{i}", r["lose_text"], ORIGIN_FABRICATED),
            r["reward_win"], r["reward_lose"],
        ))
    return out
