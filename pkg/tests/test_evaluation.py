import io
import itertools
import math

import numpy as np
import pytest
from builders import I, U
from hypothesis import given, settings
from hypothesis import strategies as st

from ecfkg.errors import EmptyRelevantSet, LengthMismatch, VocabularyMismatch
from ecfkg.evaluation import (
    EvalReport,
    MetricSet,
    evaluate,
    fisher_randomization,
    format_table,
    mean_metrics,
    metrics_at_k,
    random_baseline,
    write_report_tsv,
)
from ecfkg.graph import EntityId, KnowledgeGraph, RelationType, SplitResult
from ecfkg.model import init_model


def reference_metrics(ranked, relevant, k):
    """Deliberately naive: relevance vector, then textbook formulas."""
    rel = [1 if x in set(relevant) else 0 for x in list(ranked)[:k]]
    dcg = sum(r / math.log2(i + 2) for i, r in enumerate(rel))
    ideal = [1] * min(len(set(relevant)), k)
    idcg = sum(r / math.log2(i + 2) for i, r in enumerate(ideal))
    hits = sum(rel)
    return dcg / idcg, hits / len(set(relevant)), hits / k, float(hits > 0)


def test_metrics_small_cases():
    m = metrics_at_k([1, 2, 3], {2}, 3)
    assert m.ndcg == pytest.approx(1 / math.log2(3))
    assert (m.recall, m.precision, m.hit_ratio) == (1.0, 1 / 3, 1.0)
    perfect = metrics_at_k([5, 6, 7, 8], {5, 6}, 4)
    assert perfect.ndcg == pytest.approx(1.0)
    miss = metrics_at_k([9, 8], {1}, 2)
    assert (miss.ndcg, miss.recall, miss.precision, miss.hit_ratio) == (0, 0, 0, 0)
    # more relevant items than k: ideal DCG only counts k positions
    assert metrics_at_k([1, 2], {1, 2, 3, 4}, 2).ndcg == pytest.approx(1.0)
    # short list still divides precision by k
    assert metrics_at_k([1], {1}, 5).precision == pytest.approx(0.2)


def test_metric_errors():
    with pytest.raises(EmptyRelevantSet):
        metrics_at_k([1], set(), 3)
    with pytest.raises(ValueError):
        metrics_at_k([1], {1}, 0)


@settings(max_examples=300, deadline=None)
@given(st.permutations(list(range(30))), st.sets(st.integers(0, 40), min_size=1, max_size=12),
       st.integers(1, 35))
def test_metrics_property(ranked, relevant, k):
    m = metrics_at_k(ranked, relevant, k)
    ref = reference_metrics(ranked, relevant, k)
    assert (m.ndcg, m.recall, m.precision, m.hit_ratio) == pytest.approx(ref, abs=1e-12)
    assert m.hit_ratio >= m.precision
    for v in (m.ndcg, m.recall, m.precision, m.hit_ratio):
        assert 0.0 <= v <= 1.0 + 1e-12


def test_mean_metrics():
    assert mean_metrics([], 10) is None
    a, b = MetricSet(1, 1, 1, 1, 5), MetricSet(0, 0.5, 0, 0, 5)
    assert mean_metrics([a, b], 5) == MetricSet(0.5, 0.75, 0.5, 0.5, 5)


def _split(n_items, train, test):
    kg = KnowledgeGraph()
    for i in range(n_items):
        kg.register(I, f"i{i}")
    for u, items in enumerate(train):
        for i in items:
            kg.add((U, f"u{u}"), RelationType.PURCHASE, (I, f"i{i}"))
    kg.freeze()
    tp = {kg.entity(U, f"u{u}"): [EntityId(I, i) for i in items] for u, items in test.items()}
    return SplitResult(kg, tp)


def test_random_baseline_matches_simulation():
    split = _split(12, [[0, 1], [2, 3, 4]], {0: [5, 6], 1: [7]})
    k = 3
    exp = random_baseline(split, k)
    rng = np.random.default_rng(0)
    sims = []
    for _ in range(40_000):
        per = []
        for u, rel in split.test_purchases.items():
            cand = [i for i in range(12) if EntityId(I, i) not in split.train_graph.purchases(u)]
            ranked = [EntityId(I, int(i)) for i in rng.permutation(cand)]
            per.append(metrics_at_k(ranked, rel, k))
        sims.append(mean_metrics(per, k))
    for attr in ("ndcg", "recall", "precision", "hit_ratio"):
        assert getattr(exp, attr) == pytest.approx(np.mean([getattr(s, attr) for s in sims]), abs=5e-3)
    # user 0: 10 candidates, 2 relevant; user 1: 9 candidates, 1 relevant
    hr0 = 1 - math.comb(8, 3) / math.comb(10, 3)
    hr1 = 1 - math.comb(8, 3) / math.comb(9, 3)
    assert exp.hit_ratio == pytest.approx((hr0 + hr1) / 2, abs=1e-15)


def test_evaluate_excludes_train_and_checks_vocab():
    split = _split(6, [[0, 1], [2, 3]], {0: [2], 1: [0]})
    model = init_model(split.train_graph, 4, 0)
    # make item 0 the best for everyone; user 0 already bought it
    model.E[model.row(EntityId(I, 0))] = 10.0
    model.E[model.row(EntityId(U, 0))] = 1.0
    model.E[model.row(EntityId(U, 1))] = 1.0
    rep = evaluate(model, split, k=1)
    assert rep.n_users == 2
    assert rep.per_user[EntityId(U, 1)].hit_ratio == 1.0
    assert rep.per_user[EntityId(U, 0)].hit_ratio == 0.0
    assert list(rep.values("hit_ratio")) == [0.0, 1.0]
    other = _split(7, [[0, 1], [2, 3]], {0: [2]})
    with pytest.raises(VocabularyMismatch):
        evaluate(model, other)


def test_empty_report_formats():
    split = _split(3, [[0, 1]], {})
    rep = evaluate(init_model(split.train_graph, 2, 0), split, 2)
    assert rep.empty and rep.mean is None
    buf = io.StringIO()
    write_report_tsv([("x", rep)], buf)
    assert "NA" in buf.getvalue()
    assert "n/a" in format_table([("x", rep)])


def test_report_column_order():
    rep = EvalReport({EntityId(U, 0): MetricSet(0.1, 0.2, 0.3, 0.4, 10)},
                     MetricSet(0.1, 0.2, 0.3, 0.4, 10), 10)
    buf = io.StringIO()
    write_report_tsv([("run", rep)], buf)
    head, row = buf.getvalue().splitlines()
    assert head.split("\t")[2:] == ["NDCG", "Recall", "HR", "Prec."]
    assert row.split("\t")[2:] == ["10.000", "20.000", "40.000", "30.000"]


def brute_p(a, b):
    d = np.asarray(a, float) - np.asarray(b, float)
    obs = abs(d.mean())
    hits = 0
    pats = list(itertools.product([1, -1], repeat=len(d)))
    for s in pats:
        if abs(np.dot(s, d) / len(d)) >= obs - 1e-12:
            hits += 1
    return hits / len(pats)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_fisher_exact_small(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        a, b = rng.integers(0, 4, n) / 4, rng.integers(0, 4, n) / 4
        r = fisher_randomization(a, b)
        assert r.exact and r.iterations == 2 ** n
        assert r.p_value == pytest.approx(brute_p(a, b), abs=1e-15)


def test_fisher_identical_and_errors():
    assert fisher_randomization([0.1, 0.5, 0.2], [0.1, 0.5, 0.2]).p_value == 1.0
    assert fisher_randomization(np.ones(20), np.ones(20), iterations=500).p_value == 1.0
    with pytest.raises(LengthMismatch):
        fisher_randomization([1, 2], [1])
    with pytest.raises(LengthMismatch):
        fisher_randomization([], [])


def test_fisher_sampling_tracks_exact():
    rng = np.random.default_rng(7)
    a, b = rng.random(10), rng.random(10)
    exact = fisher_randomization(a, b, exact=True).p_value
    approx = fisher_randomization(a, b, 100_000, seed=3, exact=False)
    assert not approx.exact
    assert abs(approx.p_value - exact) < 0.02
    again = fisher_randomization(a, b, 100_000, seed=3, exact=False)
    assert again.p_value == approx.p_value


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=8))
def test_fisher_symmetric(pairs):
    a = [x for x, _ in pairs]
    b = [y for _, y in pairs]
    p = fisher_randomization(a, b).p_value
    assert p == fisher_randomization(b, a).p_value
    assert 0 < p <= 1
