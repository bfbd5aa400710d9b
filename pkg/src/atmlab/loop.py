"""Round orchestration for the adversarial tuning loop.

Each round, in order: sample fabrication candidates per training query, reward them
with the current generator's answer perplexity, pick win/lose pairs, DPO-update the
attacker against a frozen round-start reference, build permuted attacked lists
(fabrications concatenated with the retrieved list), robust-tune the generator, then
evaluate and checkpoint. A round directory is committed atomically (written to a
temp dir, renamed into place), so a crash can never leave a half-written round.

Evaluation benchmarks are fixed across rounds: the attacked lists come from one
frozen fabricator (by default the bootstrap-pretrained attacker checkpoint), so the
Iter0..Itern rows stay comparable.
"""
from __future__ import annotations

import os
import shutil
from dataclasses import dataclass

from . import attacker as atk
from .checkpoint import load_params, save_params
from .corpus import QaInstance, World
from .evaluation import cached_benchmark, evaluate_generator, log_loss_density
from .retrieval import Retriever
from .training import (CurveLog, TrainConfig, build_aligned, train_dpo,
                       train_mito)
from .util import (AtmError, StageDependencyError, dump_json, parallel_map,
                   subrng, write_jsonl)

REFERENCE_ROUND_START = "round_start"
REFERENCE_INITIAL = "initial"

def round_dir(run_dir: str, r: int) -> str:
    return os.path.join(run_dir, f"round_{r}")


def _stage_hook(stage: str) -> None:
    """Test seam: monkeypatched to inject crashes between stages."""


@dataclass(frozen=True)
class RoundState:
    round_index: int
    attacker_ckpt: str
    generator_ckpt: str
    pairs_path: str | None
    metrics_path: str | None

    @classmethod
    def for_round(cls, run_dir: str, r: int) -> "RoundState":
        d = round_dir(run_dir, r)
        pairs = os.path.join(d, "pairs.jsonl")
        metrics = os.path.join(d, "metrics.json")
        return cls(
            r,
            os.path.join(d, "attacker.ckpt"),
            os.path.join(d, "generator.ckpt"),
            pairs if os.path.exists(pairs) else None,
            metrics if os.path.exists(metrics) else None,
        )


def evaluate_round(generator, test_split, retriever, fabricator, k_ret, k_fab,
                   eval_seed, max_new=6, workers=None):
    """Aggregates plus per-query records for one generator checkpoint."""
    clean_items = cached_benchmark(test_split, retriever, None,
                                   k_ret + k_fab, 0, eval_seed, workers)
    attacked_items = cached_benchmark(test_split, retriever, fabricator,
                                      k_ret, k_fab, eval_seed, workers)
    clean = evaluate_generator(generator, clean_items, max_new)
    attacked = evaluate_generator(generator, attacked_items, max_new)
    per_query = [
        {**row, "split": split}
        for split, report in (("clean", clean), ("attacked", attacked))
        for row in report.per_query
    ]
    return {"clean": clean.to_dict(), "attacked": attacked.to_dict()}, per_query


def run_round(run_dir: str, r: int, train_split: list[QaInstance],
              test_split: list[QaInstance], retriever: Retriever,
              fabricator, cfg: TrainConfig, k_ret: int, k_fab: int, seeds: dict,
              dpo_reference: str = REFERENCE_ROUND_START,
              max_new: int = 6, workers: int | None = None) -> RoundState:
    prev = RoundState.for_round(run_dir, r - 1)
    if not (os.path.exists(prev.attacker_ckpt) and os.path.exists(prev.generator_ckpt)):
        raise StageDependencyError(f"round {r - 1} checkpoints missing under {run_dir}")
    attacker_params = load_params(prev.attacker_ckpt)
    generator_params = load_params(prev.generator_ckpt)
    if dpo_reference == REFERENCE_ROUND_START:
        ref_params = attacker_params.copy()
    elif dpo_reference == REFERENCE_INITIAL:
        ref_params = load_params(RoundState.for_round(run_dir, 0).attacker_ckpt)
    else:
        raise AtmError(f"unknown dpo_reference {dpo_reference!r}")

    queries = train_split
    if cfg.queries_per_round and cfg.queries_per_round < len(train_split):
        order = subrng(seeds["train"], "round-queries", r).permutation(len(train_split))
        queries = [train_split[int(i)] for i in order[:cfg.queries_per_round]]

    # (a) fabricate candidates and reward them with the pre-update generator
    def attack_one(q: QaInstance):
        docs = retriever.docs_for(retriever.retrieve(q, cfg.n_docs))
        rng = subrng(seeds["attack"], "fabricate", r, q.qid)
        fabs = atk.fabricate(attacker_params, q, docs[0], cfg.n_f, rng,
                             cfg.fab_temperature, cfg.fab_top_p, cfg.fab_max_new)
        rewards = atk.score_fabrications(generator_params, q, q.answer, fabs)
        pair = atk.select_pair(q, docs[0], fabs, rewards)
        attacked = atk.build_attacked_list(
            docs, fabs, subrng(seeds["attack"], "permute", r, q.qid))
        aligned = build_aligned(q.question, [d.text for d in docs],
                                [d.text for d in attacked.docs], q.answer)
        return pair, aligned

    _stage_hook("fabricate")
    results = parallel_map(attack_one, queries, workers)
    pairs = [p for p, _ in results if p is not None]
    aligned_batches = [a for _, a in results]

    # attacking-intensity snapshot under the generator that produced the rewards
    _stage_hook("pairs")
    density = None
    if pairs:
        density = log_loss_density(generator_params, pairs,
                                   {q.qid: q.answer for q in queries})

    # (b)+(c) attacker preference alignment against the frozen reference
    _stage_hook("dpo")
    curve = CurveLog()
    if pairs:
        train_dpo(attacker_params, ref_params, [p.encode() for p in pairs],
                  cfg, stage=f"dpo_r{r}", curve=curve)

    # (d)+(e) generator robust tuning on the permuted attacked lists
    _stage_hook("mito")
    train_mito(generator_params, aligned_batches, cfg, stage=f"mito_r{r}", curve=curve)

    # (f) evaluate and commit atomically
    _stage_hook("eval")
    metrics, per_query = evaluate_round(generator_params, test_split, retriever,
                                        fabricator, k_ret, k_fab, seeds["eval"],
                                        max_new, workers)
    metrics = {"round": r, "n_pairs": len(pairs), "density": density, **metrics}

    tmp = round_dir(run_dir, r) + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    save_params(os.path.join(tmp, "attacker.ckpt"), attacker_params)
    save_params(os.path.join(tmp, "generator.ckpt"), generator_params)
    atk.save_pairs(os.path.join(tmp, "pairs.jsonl"), pairs)
    dump_json(os.path.join(tmp, "metrics.json"), metrics)
    write_jsonl(os.path.join(tmp, "per_query.jsonl"), per_query)
    curve.save(os.path.join(tmp, "curves.csv"))
    _stage_hook("commit")
    os.rename(tmp, round_dir(run_dir, r))
    return RoundState.for_round(run_dir, r)


def run(run_dir: str, train_split, test_split, retriever, fabricator,
        cfg: TrainConfig, k_ret: int, k_fab: int, seeds: dict,
        dpo_reference: str = REFERENCE_ROUND_START, max_new: int = 6,
        workers: int | None = None) -> RoundState:
    """Execute all rounds, resuming past any round directory that already committed."""
    state = RoundState.for_round(run_dir, 0)
    if not (os.path.exists(state.attacker_ckpt) and os.path.exists(state.generator_ckpt)):
        raise StageDependencyError(
            "initial tuning required first: round_0 attacker/generator checkpoints missing")
    for r in range(1, cfg.n_r + 1):
        if os.path.isdir(round_dir(run_dir, r)):
            state = RoundState.for_round(run_dir, r)
            continue
        state = run_round(run_dir, r, train_split, test_split, retriever, fabricator,
                          cfg, k_ret, k_fab, seeds, dpo_reference, max_new, workers)
    return state
