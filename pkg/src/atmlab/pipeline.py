"""Pipeline stages behind the CLI subcommands.

Each stage reads earlier artifacts from the run directory, verifies its
dependencies, and writes its own outputs. Directory layout:

    <run_dir>/config.json, manifest.json
    <run_dir>/corpus/{world.jsonl, qa_train.jsonl, qa_test.jsonl, docs.jsonl}
    <run_dir>/round_0/{attacker.ckpt, generator.ckpt, metrics.json, ...}
    <run_dir>/round_<r>/{attacker.ckpt, generator.ckpt, pairs.jsonl,
                         metrics.json, per_query.jsonl, curves.csv}
"""
from __future__ import annotations

import csv
import os

import numpy as np

from . import loop as loop_mod
from .attacker import load_pairs
from .checkpoint import load_params, save_params
from .config import RunConfig
from .corpus import (QaInstance, World, gen_dataset, gen_world, load_instances,
                     load_store, load_world, save_instances, save_store, save_world,
                     swap_alternatives, with_value)
from .encoding import attacker_seq
from .evaluation import (RuleFabricator, log_loss_density, recall_accuracy_curve,
                         sweep_fab_count)
from .model import init_params
from .retrieval import Retriever
from .split import split_instances
from .training import CurveLog, synth_init_data, train_sft
from .util import (ConfigError, StageDependencyError, derive_seed, dump_json,
                   load_json, read_jsonl, subrng, write_jsonl)


def corpus_dir(run_dir: str) -> str:
    return os.path.join(run_dir, "corpus")


def _corpus_paths(run_dir: str) -> dict[str, str]:
    d = corpus_dir(run_dir)
    return {
        "world": os.path.join(d, "world.jsonl"),
        "train": os.path.join(d, "qa_train.jsonl"),
        "test": os.path.join(d, "qa_test.jsonl"),
        "docs": os.path.join(d, "docs.jsonl"),
    }


def _write_run_metadata(cfg: RunConfig, run_dir: str) -> None:
    os.makedirs(run_dir, exist_ok=True)
    dump_json(os.path.join(run_dir, "config.json"), cfg.tree)
    dump_json(os.path.join(run_dir, "manifest.json"), {
        "config_sha256": cfg.config_hash(),
        "seeds": cfg.seeds,
        "run_name": cfg.tree["run_name"],
    })


def _check_run_metadata(cfg: RunConfig, run_dir: str) -> None:
    manifest_path = os.path.join(run_dir, "manifest.json")
    if os.path.exists(manifest_path):
        manifest = load_json(manifest_path)
        if manifest.get("config_sha256") != cfg.config_hash():
            raise ConfigError(
                f"run directory {run_dir} was created with a different config; "
                "use a fresh --run-dir or the original config")


def stage_gen_corpus(cfg: RunConfig, run_dir: str) -> None:
    _check_run_metadata(cfg, run_dir)
    _write_run_metadata(cfg, run_dir)
    paths = _corpus_paths(run_dir)
    os.makedirs(corpus_dir(run_dir), exist_ok=True)
    c = cfg.corpus
    world = gen_world(cfg.seeds["corpus"], c["n_entities"], c["n_attrs"])
    instances, docs = gen_dataset(
        world, c["n_train"] + c["n_test"], c["n_distractors"],
        cfg.seeds["corpus"], c["questions_per_fact"])
    train, test = split_instances(instances, c["n_train"], c["n_test"],
                                  c["held_out_facts"], cfg.seeds["corpus"])
    save_world(paths["world"], world)
    save_instances(paths["train"], train)
    save_instances(paths["test"], test)
    save_store(paths["docs"], docs)


def load_corpus(run_dir: str):
    paths = _corpus_paths(run_dir)
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise StageDependencyError("stage gen-corpus required first: missing "
                                   + ", ".join(sorted(missing)))
    world = load_world(paths["world"])
    train = load_instances(paths["train"])
    test = load_instances(paths["test"])
    retriever = Retriever(load_store(paths["docs"]))
    return world, train, test, retriever


def attacker_pretrain_seqs(train_split: list[QaInstance], retriever: Retriever,
                           world: World, seed: int):
    """Bootstrap data: imitate entity-swap fabrications of the top-ranked document.

    Swaps that would reintroduce the query's own answer are filtered so the learned
    attacker never practices writing answer-bearing documents.
    """
    rng = subrng(seed, "attacker-pretrain")
    seqs = []
    for q in train_split:
        example = retriever.docs_for(retriever.retrieve(q, 1))[0]
        _, _, alternatives = swap_alternatives(example, world)
        answer_value = tuple(q.answer.split())
        alternatives = [v for v in alternatives if v != answer_value]
        if not alternatives:
            continue
        value = alternatives[int(rng.integers(len(alternatives)))]
        fab = with_value(example, value, f"pre-{q.qid}")
        seqs.append(attacker_seq(q.question, example.text, fab.text))
    return seqs


def benchmark_fabricator(cfg: RunConfig, run_dir: str, world: World):
    """The frozen evaluation attack shared by every round's benchmarks."""
    from .evaluation import ModelFabricator, RuleFabricator

    if cfg.benchmark["fabricator"] == "rule":
        return RuleFabricator(world)
    ckpt = os.path.join(loop_mod.round_dir(run_dir, 0), "attacker.ckpt")
    if not os.path.exists(ckpt):
        raise StageDependencyError(
            "stage pretrain-attacker required first: the benchmark fabricator is "
            f"the round-0 attacker checkpoint ({ckpt})")
    import hashlib
    digest = hashlib.sha256(open(ckpt, "rb").read()).hexdigest()[:16]
    t = cfg.tree["train"]
    return ModelFabricator(load_params(ckpt), t["fab_temperature"], t["fab_top_p"],
                           t["fab_max_new"], cache_key=f"model:{digest}")


def stage_pretrain_attacker(cfg: RunConfig, run_dir: str) -> str:
    _check_run_metadata(cfg, run_dir)
    world, train, _, retriever = load_corpus(run_dir)
    tc = cfg.train_config()
    params = init_params(derive_seed(cfg.seeds["train"], "attacker"), cfg.dims())
    seqs = attacker_pretrain_seqs(train, retriever, world, cfg.seeds["train"])
    curve = CurveLog()
    train_sft(params, seqs, tc, tc.attacker_epochs, "pretrain_attacker", curve)
    r0 = loop_mod.round_dir(run_dir, 0)
    os.makedirs(r0, exist_ok=True)
    path = os.path.join(r0, "attacker.ckpt")
    save_params(path, params)
    curve.save(os.path.join(r0, "curves.csv"), append=True)
    return path


def stage_init_tune(cfg: RunConfig, run_dir: str) -> str:
    _check_run_metadata(cfg, run_dir)
    world, train, test, retriever = load_corpus(run_dir)
    tc = cfg.train_config()
    params = init_params(derive_seed(cfg.seeds["train"], "generator"), cfg.dims())
    seqs = synth_init_data(train, retriever, tc.n_docs, tc.init_list_lengths)
    curve = CurveLog()
    train_sft(params, seqs, tc, tc.init_epochs, "init_tune", curve)
    r0 = loop_mod.round_dir(run_dir, 0)
    os.makedirs(r0, exist_ok=True)
    path = os.path.join(r0, "generator.ckpt")
    save_params(path, params)
    curve.save(os.path.join(r0, "curves.csv"), append=True)
    b = cfg.benchmark
    fab = benchmark_fabricator(cfg, run_dir, world)
    metrics, per_query = loop_mod.evaluate_round(
        params, test, retriever, fab, b["k_ret"], b["k_fab"],
        cfg.seeds["eval"], b["max_new"], cfg.workers)
    dump_json(os.path.join(r0, "metrics.json"),
              {"round": 0, "n_pairs": 0, "density": None, **metrics})
    write_jsonl(os.path.join(r0, "per_query.jsonl"), per_query)
    return path


def stage_loop(cfg: RunConfig, run_dir: str):
    _check_run_metadata(cfg, run_dir)
    world, train, test, retriever = load_corpus(run_dir)
    b = cfg.benchmark
    fab = benchmark_fabricator(cfg, run_dir, world)
    return loop_mod.run(
        run_dir, train, test, retriever, fab, cfg.train_config(),
        b["k_ret"], b["k_fab"], cfg.seeds,
        dpo_reference=cfg.tree["loop"]["dpo_reference"],
        max_new=b["max_new"], workers=cfg.workers)


def _require_round(run_dir: str, r: int) -> loop_mod.RoundState:
    state = loop_mod.RoundState.for_round(run_dir, r)
    if not os.path.exists(state.generator_ckpt):
        raise StageDependencyError(
            f"round {r} generator checkpoint missing; run the earlier stages first")
    return state


def latest_round(run_dir: str, n_r: int) -> int:
    r = -1
    for i in range(n_r + 1):
        if os.path.exists(loop_mod.RoundState.for_round(run_dir, i).generator_ckpt):
            r = i
    if r < 0:
        raise StageDependencyError("no committed rounds found; run init-tune first")
    return r


def _round_density(cfg: RunConfig, run_dir: str, r: int, train, retriever):
    """Recompute the round's attacking-intensity snapshot from its audit artifacts."""
    state = loop_mod.RoundState.for_round(run_dir, r)
    if r == 0 or state.pairs_path is None or not os.path.exists(state.pairs_path):
        return None, 0
    records = read_jsonl(state.pairs_path)
    if not records:
        return None, 0
    by_qid = {q.qid: q for q in train}
    questions = {qid: by_qid[qid].question for qid in {rec["qid"] for rec in records}}
    examples = {
        qid: retriever.docs_for(retriever.retrieve(by_qid[qid], 1))[0].text
        for qid in questions
    }
    pairs = load_pairs(state.pairs_path, questions, examples)
    scorer = load_params(_require_round(run_dir, r - 1).generator_ckpt)
    answers = {qid: by_qid[qid].answer for qid in questions}
    return log_loss_density(scorer, pairs, answers), len(pairs)


def stage_eval(cfg: RunConfig, run_dir: str, round_index: int | None) -> dict:
    _check_run_metadata(cfg, run_dir)
    world, train, test, retriever = load_corpus(run_dir)
    r = latest_round(run_dir, cfg.train_config().n_r) if round_index is None else round_index
    state = _require_round(run_dir, r)
    params = load_params(state.generator_ckpt)
    b = cfg.benchmark
    fab = benchmark_fabricator(cfg, run_dir, world)
    metrics, per_query = loop_mod.evaluate_round(
        params, test, retriever, fab, b["k_ret"], b["k_fab"],
        cfg.seeds["eval"], b["max_new"], cfg.workers)
    density, n_pairs = _round_density(cfg, run_dir, r, train, retriever)
    out = {"round": r, "n_pairs": n_pairs, "density": density, **metrics}
    d = loop_mod.round_dir(run_dir, r)
    dump_json(os.path.join(d, "metrics.json"), out)
    write_jsonl(os.path.join(d, "per_query.jsonl"), per_query)
    return out


def stage_sweep(cfg: RunConfig, run_dir: str, round_index: int | None) -> list[dict]:
    _check_run_metadata(cfg, run_dir)
    world, _, test, retriever = load_corpus(run_dir)
    r = latest_round(run_dir, cfg.train_config().n_r) if round_index is None else round_index
    state = _require_round(run_dir, r)
    params = load_params(state.generator_ckpt)
    b = cfg.benchmark
    fab = benchmark_fabricator(cfg, run_dir, world)
    rows = sweep_fab_count(params, test, retriever, fab,
                           b["total"], cfg.seeds["eval"], b["max_new"])
    path = os.path.join(loop_mod.round_dir(run_dir, r), "sweep.csv")
    _write_csv(path, ["n_fab", "n_ret", "em", "subspan_em", "f1", "n"], rows)
    return rows


def stage_analyze(cfg: RunConfig, run_dir: str) -> dict:
    """Density and recall-curve artifacts plus a per-round summary table."""
    _check_run_metadata(cfg, run_dir)
    world, train, test, retriever = load_corpus(run_dir)
    tc = cfg.train_config()
    b = cfg.benchmark
    summary = {"rounds": []}
    for r in range(tc.n_r + 1):
        state = loop_mod.RoundState.for_round(run_dir, r)
        if not os.path.exists(state.generator_ckpt) or state.metrics_path is None:
            continue
        metrics = load_json(state.metrics_path)
        summary["rounds"].append(metrics)
        density = metrics.get("density")
        if density:
            rows = [
                {"bin_lo": density["bin_edges"][i], "bin_hi": density["bin_edges"][i + 1],
                 "win_density": density["win_density"][i],
                 "lose_density": density["lose_density"][i]}
                for i in range(len(density["win_density"]))
            ]
            _write_csv(os.path.join(loop_mod.round_dir(run_dir, r), "density.csv"),
                       ["bin_lo", "bin_hi", "win_density", "lose_density"], rows)

    final = latest_round(run_dir, tc.n_r)
    params = load_params(loop_mod.RoundState.for_round(run_dir, final).generator_ckpt)
    ks = list(range(1, min(10, len(retriever.store)) + 1))
    curve = recall_accuracy_curve(params, test, retriever, ks,
                                  cfg.seeds["eval"], b["max_new"])
    _write_csv(os.path.join(run_dir, "recall_curve.csv"),
               ["k", "recall", "subspan_em", "em", "f1"], curve)
    summary["recall_curve"] = curve
    dump_json(os.path.join(run_dir, "analysis.json"), summary)
    return summary


def _write_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def format_summary(summary: dict) -> str:
    lines = [f"{'round':>5}  {'clean SEM':>9}  {'atk SEM':>8}  {'atk EM':>7}  "
             f"{'atk F1':>7}  {'pairs':>5}  {'win loss':>8}"]
    for m in summary.get("rounds", []):
        density = m.get("density") or {}
        lines.append(
            f"{m['round']:>5}  {100 * m['clean']['subspan_em']:>9.2f}  "
            f"{100 * m['attacked']['subspan_em']:>8.2f}  "
            f"{100 * m['attacked']['em']:>7.2f}  {100 * m['attacked']['f1']:>7.2f}  "
            f"{m.get('n_pairs', 0):>5}  "
            f"{density.get('win_mean', float('nan')):>8.3f}")
    return "\n".join(lines)
