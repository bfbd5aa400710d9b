"""Losses and optimization: answer-span SFT, preference-pair DPO, robustness KL,
and the combined robust-tuning loss (attacked-context SFT + alpha * KL).

All losses evaluate the tied vocabulary head only at answer rows and push gradients
through the trunk's hand-written backward pass. The clean-context distributions in
the KL term are a frozen target: recomputed from the current parameters every step,
but no gradient flows through that branch.

Loss ops default to float64 (the gradient-check/identity mode); the epoch loops may
run in float32 for speed. Adam state and parameters always stay float64.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .corpus import QaInstance
from .encoding import TASK_CLOSED, TASK_EXTRACT, TASK_ONE, TASK_RAG, qa_seq
from .model import (ModelParams, TokenSeq, head_log_probs, trunk_backward,
                    trunk_forward)
from .retrieval import Retriever
from .util import AtmError
from .vocab import PAD_ID


DEFAULT_INIT_LIST_LENGTHS = (10, 5, 8, 3)


@dataclass
class TrainConfig:
    """Hyper-parameters for every tuning stage."""

    alpha: float = 0.2            # weight of the KL robustness term
    beta: float = 0.1             # DPO preference sharpness
    lr: float = 3e-3
    dpo_lr: float = 1e-3
    mito_lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    n_f: int = 4                  # fabrications sampled per query per round
    n_r: int = 3                  # adversarial rounds
    n_docs: int = 5               # retrieved documents per query context
    init_epochs: int = 30
    attacker_epochs: int = 8
    dpo_epochs: int = 1
    mito_epochs: int = 1
    queries_per_round: int = 0    # 0 = all training queries
    fab_temperature: float = 0.8
    fab_top_p: float = 0.95
    fab_max_new: int = 20
    train_dtype: str = "float32"  # precision of the epoch loops, not of the loss ops
    init_list_lengths: tuple = DEFAULT_INIT_LIST_LENGTHS

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise AtmError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 < self.beta <= 10.0:
            raise AtmError(f"beta must be in (0, 10], got {self.beta}")
        if self.lr <= 0 or self.batch_size < 1:
            raise AtmError("learning rate and batch size must be positive")
        if self.n_f < 2:
            raise AtmError("n_f must be >= 2 to form preference pairs")
        if self.n_r < 0:
            raise AtmError("n_r must be >= 0")
        if self.train_dtype not in ("float32", "float64"):
            raise AtmError("train_dtype must be 'float32' or 'float64'")
        if not self.init_list_lengths or any(k < 1 for k in self.init_list_lengths):
            raise AtmError("init_list_lengths must be positive")

    @property
    def np_dtype(self):
        return np.float32 if self.train_dtype == "float32" else np.float64


# ----------------------------- batches -----------------------------


def _stack(seqs: list[TokenSeq]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    padded = [s.left_pad_to(width, PAD_ID) for s in seqs]
    ids = np.stack([s.ids for s in padded])
    attn = np.stack([s.attention_mask for s in padded])
    loss = np.stack([s.loss_mask for s in padded])
    return ids, attn, loss


def _span_index(ids: np.ndarray, loss: np.ndarray):
    """(batch, row, target) triples: row t-1 predicts the loss-masked token at t."""
    bs, ps = np.nonzero(loss)
    if ps.size == 0:
        raise AtmError("batch has an empty answer span")
    if np.any(ps == 0):
        raise AtmError("loss-masked position 0 has no predecessor")
    return bs, ps - 1, ids[bs, ps]


def _span_head(params, hf, bs, rows, dtype):
    rows_hf = hf[bs, rows]                                  # (S, D)
    return rows_hf, head_log_probs(params, rows_hf, dtype)  # (S, V)


def _head_backward(params, hf_shape, bs, rows, d_row_logits, rows_hf, dtype):
    """Scatter head-row gradients into dLoss/d(hidden) plus the tied-embedding grad."""
    w = params.tensors["w_emb"].astype(dtype, copy=False)
    d_hf = np.zeros(hf_shape, dtype=dtype)
    d_hf[bs, rows] = d_row_logits @ w
    return d_hf, d_row_logits.T @ rows_hf


@dataclass
class AlignedBatch:
    """Clean and attacked renderings of one query, left-padded so answers coincide."""

    clean: TokenSeq
    attacked: TokenSeq

    def __post_init__(self) -> None:
        width = max(len(self.clean), len(self.attacked))
        self.clean = self.clean.left_pad_to(width, PAD_ID)
        self.attacked = self.attacked.left_pad_to(width, PAD_ID)
        if not np.array_equal(self.clean.loss_mask, self.attacked.loss_mask):
            raise AtmError("aligned pair has mismatched answer spans")
        span = self.clean.loss_mask == 1
        if not np.array_equal(self.clean.ids[span], self.attacked.ids[span]):
            raise AtmError("aligned pair has different answer tokens")


def build_aligned(question: str, clean_doc_texts: list[str],
                  attacked_doc_texts: list[str], answer: str) -> AlignedBatch:
    return AlignedBatch(
        qa_seq(question, clean_doc_texts, answer, TASK_RAG),
        qa_seq(question, attacked_doc_texts, answer, TASK_RAG),
    )


# ----------------------------- SFT -----------------------------


def sft_loss_and_grads(params: ModelParams, batch: list[TokenSeq],
                       with_grads: bool = True, dtype=np.float64):
    """Mean over the batch of the summed answer-token negative log-likelihood."""
    if not batch:
        raise AtmError("empty batch")
    ids, attn, loss_mask = _stack(batch)
    hf, cache = trunk_forward(params, ids, attn, need_cache=with_grads, dtype=dtype)
    bs, rows, targets = _span_index(ids, loss_mask)
    rows_hf, row_logp = _span_head(params, hf, bs, rows, dtype)
    value = float(-row_logp[np.arange(len(targets)), targets].sum() / len(batch))
    if not np.isfinite(value):
        raise AtmError("non-finite SFT loss")
    if not with_grads:
        return value, None
    d_rows = np.exp(row_logp) / len(batch)
    d_rows[np.arange(len(targets)), targets] -= 1.0 / len(batch)
    d_hf, g_emb = _head_backward(params, hf.shape, bs, rows, d_rows, rows_hf, dtype)
    return value, trunk_backward(params, cache, d_hf, g_emb)


def sft_loss(params: ModelParams, batch: list[TokenSeq]) -> float:
    return sft_loss_and_grads(params, batch, with_grads=False)[0]


def synth_init_data(dataset: list[QaInstance], retriever: Retriever,
                    n_docs: int = 5,
                    list_lengths: tuple[int, ...] | None = None,
                    shuffle: bool = True) -> list[TokenSeq]:
    """Four training sequences per QA instance.

    list QA over the top retrieved documents, single-golden-document QA, closed-book
    QA, and golden-document extraction (the target is the document text itself);
    each layout carries its own structural marker.

    The retrieved-list length cycles through list_lengths across instances so the
    tuned model is at home with any list size it will meet at evaluation time, and
    each list is shuffled (seeded per instance) so the golden document's rank never
    becomes a positional crutch.
    """
    from .util import subrng

    lengths = tuple(list_lengths) if list_lengths else (n_docs,)
    lengths = tuple(min(max(k, 1), len(retriever.store)) for k in lengths)
    out: list[TokenSeq] = []
    for i, inst in enumerate(dataset):
        k = lengths[i % len(lengths)]
        top = [d.text for d in retriever.docs_for(retriever.retrieve(inst, k))]
        if shuffle:
            rng = subrng(0xA11, "init-shuffle", inst.qid)
            top = [top[int(j)] for j in rng.permutation(len(top))]
        golden = retriever.by_id[inst.golden_doc_id].text
        out.append(qa_seq(inst.question, top, inst.answer, TASK_RAG))
        out.append(qa_seq(inst.question, [golden], inst.answer, TASK_ONE))
        out.append(qa_seq(inst.question, [], inst.answer, TASK_CLOSED))
        out.append(qa_seq(inst.question, top, golden, TASK_EXTRACT))
    return out


# ----------------------------- KL robustness term -----------------------------


def kl_term_given_target(params: ModelParams, attacked: TokenSeq,
                         target_row_logp: np.ndarray, with_grads: bool = True,
                         dtype=np.float64):
    """KL(frozen clean distribution || attacked distribution) summed over the span.

    target_row_logp holds the clean-context log-probabilities at the answer rows
    (shape span x vocab) and is treated as a constant.
    """
    ids, attn, loss_mask = _stack([attacked])
    hf, cache = trunk_forward(params, ids, attn, need_cache=with_grads, dtype=dtype)
    bs, rows, _ = _span_index(ids, loss_mask)
    rows_hf, a_rows = _span_head(params, hf, bs, rows, dtype)
    p_t = np.exp(target_row_logp)
    value = float((p_t * (target_row_logp - a_rows)).sum())
    if not with_grads:
        return value, None
    d_rows = np.exp(a_rows) - p_t
    d_hf, g_emb = _head_backward(params, hf.shape, bs, rows, d_rows, rows_hf, dtype)
    return value, trunk_backward(params, cache, d_hf, g_emb)


def clean_row_log_probs(params: ModelParams, seq: TokenSeq, dtype=np.float64) -> np.ndarray:
    """Answer-row log-probability matrix of a sequence (the KL target)."""
    ids, attn, loss_mask = _stack([seq])
    hf, _ = trunk_forward(params, ids, attn, dtype=dtype)
    bs, rows, _ = _span_index(ids, loss_mask)
    return _span_head(params, hf, bs, rows, dtype)[1]


def kl_term(params: ModelParams, aligned: AlignedBatch) -> float:
    """Token-level KL between clean-context and attacked-context answer distributions."""
    target = clean_row_log_probs(params, aligned.clean)
    value, _ = kl_term_given_target(params, aligned.attacked, target, with_grads=False)
    return value


# ----------------------------- combined robust loss -----------------------------


def mito_batch(params: ModelParams, pairs: list[AlignedBatch], alpha: float,
               with_grads: bool = True, dtype=np.float64):
    """Mean over pairs of [attacked-context SFT + alpha * KL(clean || attacked)].

    Returns (loss, sft_component, kl_component, grads). The clean forward pass is a
    frozen target; only the attacked pass carries gradient.
    """
    if alpha < 0:
        raise AtmError(f"alpha must be >= 0, got {alpha}")
    if not pairs:
        raise AtmError("empty aligned batch")
    n = len(pairs)
    clean_ids, clean_attn, _ = _stack([p.clean for p in pairs])
    atk_ids, atk_attn, atk_loss = _stack([p.attacked for p in pairs])
    clean_hf, _ = trunk_forward(params, clean_ids, clean_attn, dtype=dtype)
    atk_hf, cache = trunk_forward(params, atk_ids, atk_attn, need_cache=with_grads,
                                  dtype=dtype)

    bs, rows, targets = _span_index(atk_ids, atk_loss)
    # members of a pair share padding, so clean answer rows sit at the same indices
    t_rows = _span_head(params, clean_hf, bs, rows, dtype)[1]
    rows_hf, a_rows = _span_head(params, atk_hf, bs, rows, dtype)
    idx = np.arange(len(targets))
    sft_component = float(-a_rows[idx, targets].sum() / n)
    p_t = np.exp(t_rows)
    kl_component = float((p_t * (t_rows - a_rows)).sum() / n)
    value = sft_component + alpha * kl_component
    if not np.isfinite(value):
        raise AtmError("non-finite robust-tuning loss")
    if not with_grads:
        return value, sft_component, kl_component, None

    p_atk = np.exp(a_rows)
    d_rows = p_atk.copy()
    d_rows[idx, targets] -= 1.0
    d_rows += np.asarray(alpha, dtype=dtype) * (p_atk - p_t)
    d_rows /= n
    d_hf, g_emb = _head_backward(params, atk_hf.shape, bs, rows, d_rows, rows_hf, dtype)
    return value, sft_component, kl_component, trunk_backward(params, cache, d_hf, g_emb)


def mito_loss(params: ModelParams, aligned: AlignedBatch, alpha: float) -> float:
    value, _, _, _ = mito_batch(params, [aligned], alpha, with_grads=False)
    return value


# ----------------------------- DPO -----------------------------


@dataclass
class EncodedPair:
    """Win/lose fabrication sequences sharing one (question, example-doc) prompt."""

    win: TokenSeq
    lose: TokenSeq


def dpo_batch(policy: ModelParams, ref: ModelParams, pairs: list[EncodedPair],
              beta: float, with_grads: bool = True, dtype=np.float64):
    """Mean preference loss -log sigmoid(beta * margin) over the batch.

    Sequence log-probabilities sum over the fabrication tokens only; the reference
    model is a frozen snapshot.
    """
    if not pairs:
        raise AtmError("empty preference batch")
    n = len(pairs)
    seqs = [p.win for p in pairs] + [p.lose for p in pairs]
    ids, attn, loss_mask = _stack(seqs)
    pol_hf, cache = trunk_forward(policy, ids, attn, need_cache=with_grads, dtype=dtype)
    ref_hf, _ = trunk_forward(ref, ids, attn, dtype=dtype)

    bs, rows, targets = _span_index(ids, loss_mask)
    rows_hf, pol_rows = _span_head(policy, pol_hf, bs, rows, dtype)
    ref_rows = _span_head(ref, ref_hf, bs, rows, dtype)[1]
    idx = np.arange(len(targets))

    pol_sum = np.zeros(2 * n)
    ref_sum = np.zeros(2 * n)
    np.add.at(pol_sum, bs, pol_rows[idx, targets].astype(np.float64))
    np.add.at(ref_sum, bs, ref_rows[idx, targets].astype(np.float64))
    ratio = pol_sum - ref_sum
    margin = beta * (ratio[:n] - ratio[n:])
    value = float(np.logaddexp(0.0, -margin).mean())
    if not np.isfinite(value):
        raise AtmError("non-finite DPO loss")
    if not with_grads:
        return value, margin, None

    # d/dmargin of -log sigmoid(margin) is -sigmoid(-margin)
    dmargin = -1.0 / (1.0 + np.exp(margin)) / n
    coef = np.concatenate([beta * dmargin, -beta * dmargin])   # per-sequence dL/dlogpi
    crow = coef[bs].astype(dtype)[:, None]
    d_rows = -np.exp(pol_rows) * crow
    d_rows[idx, targets] += crow[:, 0]
    d_hf, g_emb = _head_backward(policy, pol_hf.shape, bs, rows, d_rows, rows_hf, dtype)
    return value, margin, trunk_backward(policy, cache, d_hf, g_emb)


def dpo_loss(policy: ModelParams, ref: ModelParams, pair: EncodedPair, beta: float) -> float:
    value, _, _ = dpo_batch(policy, ref, [pair], beta, with_grads=False)
    return value


# ----------------------------- optimizer -----------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """In-place Adam update; aborts without touching params on non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise AtmError(f"non-finite gradient for {name}; step aborted")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name in sorted(grads):
        g = grads[name].astype(np.float64, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(params.tensors[name])
            state.m[name] = m
            state.v[name] = np.zeros_like(params.tensors[name])
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        params.tensors[name] -= lr * mhat / (np.sqrt(vhat) + state.eps)
    params.check_finite()


# ----------------------------- curves -----------------------------


class CurveLog:
    """Accumulates (step, stage, loss, kl_component, sft_component) rows."""

    def __init__(self) -> None:
        self.rows: list[tuple] = []

    def add(self, step: int, stage: str, loss: float, kl: float, sft: float) -> None:
        self.rows.append((step, stage, repr(float(loss)), repr(float(kl)), repr(float(sft))))

    def save(self, path: str, append: bool = False) -> None:
        mode = "a" if append and os.path.exists(path) else "w"
        with open(path, mode, newline="") as fh:
            writer = csv.writer(fh)
            if mode == "w":
                writer.writerow(["step", "stage", "loss", "kl_component", "sft_component"])
            writer.writerows(self.rows)


# ----------------------------- epoch loops -----------------------------


def _batched(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_sft(params: ModelParams, seqs: list[TokenSeq], cfg: TrainConfig,
              epochs: int, stage: str, curve: CurveLog | None = None) -> None:
    """Epochs of Adam on the answer-span SFT loss; deterministic in cfg.seed."""
    from .util import subrng

    state = AdamState()
    step = 0
    for epoch in range(epochs):
        order = subrng(cfg.seed, "sft-order", stage, epoch).permutation(len(seqs))
        for idx in _batched(len(seqs), cfg.batch_size, order):
            loss, grads = sft_loss_and_grads(params, [seqs[i] for i in idx],
                                             dtype=cfg.np_dtype)
            adam_step(params, grads, state, cfg.lr)
            if curve is not None:
                curve.add(step, stage, loss, 0.0, loss)
            step += 1


def train_dpo(policy: ModelParams, ref: ModelParams, pairs: list[EncodedPair],
              cfg: TrainConfig, stage: str, curve: CurveLog | None = None) -> None:
    from .util import subrng

    state = AdamState()
    step = 0
    for epoch in range(cfg.dpo_epochs):
        order = subrng(cfg.seed, "dpo-order", stage, epoch).permutation(len(pairs))
        for idx in _batched(len(pairs), cfg.batch_size, order):
            loss, _, grads = dpo_batch(policy, ref, [pairs[i] for i in idx],
                                       cfg.beta, dtype=cfg.np_dtype)
            adam_step(policy, grads, state, cfg.dpo_lr)
            if curve is not None:
                curve.add(step, stage, loss, 0.0, 0.0)
            step += 1


def train_mito(params: ModelParams, pairs: list[AlignedBatch], cfg: TrainConfig,
               stage: str, curve: CurveLog | None = None) -> None:
    from .util import subrng

    state = AdamState()
    step = 0
    for epoch in range(cfg.mito_epochs):
        order = subrng(cfg.seed, "mito-order", stage, epoch).permutation(len(pairs))
        for idx in _batched(len(pairs), cfg.batch_size, order):
            loss, sft_c, kl_c, grads = mito_batch(params, [pairs[i] for i in idx],
                                                  cfg.alpha, dtype=cfg.np_dtype)
            adam_step(params, grads, state, cfg.mito_lr)
            if curve is not None:
                curve.add(step, stage, loss, kl_c, sft_c)
            step += 1
