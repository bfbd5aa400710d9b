import numpy as np
import pytest

from atmlab.attacker import PreferencePair
from atmlab.corpus import Document
from atmlab.evaluation import (BenchmarkItem, ModelFabricator, RuleFabricator,
                               build_benchmark, copy_baseline_hit_rate,
                               evaluate_generator, greedy_answers,
                               log_loss_density, recall_accuracy_curve,
                               score_predictions, scripted_copy_predictions,
                               subspan_em, sweep_fab_count)
from atmlab.model import init_params
from atmlab.retrieval import recall_at_k
from atmlab.util import SizingError, subrng


@pytest.fixture(scope="module")
def bench_bits(small_world, small_corpus, small_retriever):
    instances, docs = small_corpus
    return small_world, instances[:12], small_retriever


def test_benchmark_default_sizes(bench_bits):
    world, split, ret = bench_bits
    items = build_benchmark(split, ret, RuleFabricator(world), 5, 5, 11)
    assert all(len(i.doc_texts) == 10 for i in items)
    assert all(sorted(i.provenance).count("fabricated") == 5 for i in items)


def test_benchmark_clean_mode(bench_bits):
    world, split, ret = bench_bits
    items = build_benchmark(split, ret, None, 5, 0, 11)
    assert all(len(i.doc_texts) == 5 for i in items)
    assert all(set(i.provenance) == {"retrieved"} for i in items)


def test_benchmark_deterministic_and_order_free(bench_bits):
    world, split, ret = bench_bits
    fab = RuleFabricator(world)
    a = build_benchmark(split, ret, fab, 3, 3, 11)
    b = build_benchmark(split, ret, fab, 3, 3, 11)
    assert a == b
    # per-query derivation: a permuted split yields the same per-qid items
    c = build_benchmark(split[::-1], ret, fab, 3, 3, 11)
    assert {i.qid: i for i in c} == {i.qid: i for i in a}
    d = build_benchmark(split, ret, fab, 3, 3, 12)
    assert d != a


def test_benchmark_store_too_small(bench_bits):
    world, split, ret = bench_bits
    with pytest.raises(SizingError):
        build_benchmark(split, ret, RuleFabricator(world), len(ret.store) + 1, 0, 11)


def test_benchmark_fabrications_never_contain_answer(bench_bits):
    world, split, ret = bench_bits
    items = build_benchmark(split, ret, RuleFabricator(world), 5, 5, 11)
    for inst, item in zip(split, items):
        ans = inst.answer.split()
        for text, origin in zip(item.doc_texts, item.provenance):
            if origin != "fabricated":
                continue
            toks = text.split()
            assert not any(toks[i:i + len(ans)] == ans
                           for i in range(len(toks) - len(ans) + 1))


def test_model_fabricator_runs(bench_bits, full_dims):
    world, split, ret = bench_bits
    params = init_params(3, full_dims)
    fab = ModelFabricator(params, max_new=6)
    items = build_benchmark(split[:3], ret, fab, 2, 2, 13)
    assert all(len(i.doc_texts) == 4 for i in items)


def test_evaluate_generator_report(bench_bits, full_dims):
    world, split, ret = bench_bits
    params = init_params(3, full_dims)
    items = build_benchmark(split, ret, None, 3, 0, 11)
    report = evaluate_generator(params, items, max_new=4)
    assert report.n == len(items)
    assert 0.0 <= report.em <= report.subspan_em <= 1.0
    assert 0.0 <= report.f1 <= 1.0
    assert len(report.per_query) == len(items)
    for row in report.per_query:
        assert row["em"] <= row["subspan_em"]


def test_score_predictions_mismatch(bench_bits):
    world, split, ret = bench_bits
    items = build_benchmark(split, ret, None, 2, 0, 11)
    with pytest.raises(Exception):
        score_predictions(items, ["x"] * (len(items) + 1))


def test_scripted_copy_baseline_degrades_with_fabrications(bench_bits):
    """A context-copying baseline loses accuracy monotonically as fabs displace docs."""
    world, split, ret = bench_bits
    fab = RuleFabricator(world)
    scores = []
    for n_fab in range(10):
        items = build_benchmark(split, ret, fab, 10 - n_fab, n_fab, 11)
        scores.append(copy_baseline_hit_rate(items))
    assert all(hi >= lo for hi, lo in zip(scores, scores[1:]))
    assert scores[0] > scores[-1]


def test_sweep_table_shape(bench_bits, full_dims):
    world, split, ret = bench_bits
    params = init_params(3, full_dims)
    rows = sweep_fab_count(params, split[:4], ret, RuleFabricator(world), 4, 11, max_new=3)
    assert len(rows) == 4
    assert [r["n_fab"] for r in rows] == [0, 1, 2, 3]
    assert all(r["n_fab"] + r["n_ret"] == 4 for r in rows)


def test_sweep_zero_column_equals_clean_benchmark(bench_bits, full_dims):
    world, split, ret = bench_bits
    params = init_params(3, full_dims)
    rows = sweep_fab_count(params, split[:4], ret, RuleFabricator(world), 4, 11, max_new=3)
    items = build_benchmark(split[:4], ret, RuleFabricator(world), 4, 0, 11)
    direct = evaluate_generator(params, items, max_new=3)
    assert rows[0]["subspan_em"] == direct.subspan_em
    assert rows[0]["em"] == direct.em


def test_log_loss_density_properties(bench_bits, full_dims):
    world, split, ret = bench_bits
    params = init_params(3, full_dims)
    docs = [Document(f"f{i}", ret.store[i].text, "fabricated") for i in range(4)]
    pairs = [
        PreferencePair(split[0].qid, split[0].question, ret.store[0].text,
                       docs[0], docs[1], 9.0, 2.0),
        PreferencePair(split[1].qid, split[1].question, ret.store[1].text,
                       docs[2], docs[3], 7.5, 3.0),
    ]
    answers = {q.qid: q.answer for q in split}
    out = log_loss_density(params, pairs, answers, bins=8)
    assert len(out["win_density"]) == 8
    assert len(out["bin_edges"]) == 9
    assert all(v >= 0 for v in out["win_density"] + out["lose_density"])
    widths = np.diff(out["bin_edges"])
    assert np.isclose(float((widths * out["win_density"]).sum()), 1.0)
    assert np.isclose(float((widths * out["lose_density"]).sum()), 1.0)
    assert out["n_pairs"] == 2


def test_recall_accuracy_curve(bench_bits, full_dims):
    world, split, ret = bench_bits
    params = init_params(3, full_dims)
    rows = recall_accuracy_curve(params, split[:5], ret, [1, 3, 5], 11, max_new=3)
    recalls = [r["recall"] for r in rows]
    assert recalls == sorted(recalls)
    assert rows[0]["k"] == 1
    # spot re-evaluation at k=3 matches an independent single-k run
    again = recall_accuracy_curve(params, split[:5], ret, [3], 11, max_new=3)
    assert again[0] == rows[1]
    assert rows[1]["recall"] == recall_at_k(split[:5], ret, 3)
    with pytest.raises(SizingError):
        recall_accuracy_curve(params, split[:5], ret, [0, 2], 11)
