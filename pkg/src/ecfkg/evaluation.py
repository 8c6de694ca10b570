"""Ranking metrics, test-split evaluation, significance testing, ablations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import EmptyRelevantSet, LengthMismatch, VocabularyMismatch
from .graph import EntityId, KnowledgeGraph, RelationType, SplitResult, filter_relations, split_train_test
from .model import EmbeddingModel, Hyperparams, train
from .recommend import top_n
from .seeding import rng_for

EXACT_LIMIT = 12


@dataclass(frozen=True)
class MetricSet:
    ndcg: float
    recall: float
    precision: float
    hit_ratio: float
    k: int


def metrics_at_k(ranked: Sequence, relevant, k: int) -> MetricSet:
    """Binary-relevance NDCG, recall, precision and hit ratio of ``ranked[:k]``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        raise EmptyRelevantSet("relevant set is empty")
    dcg = 0.0
    hits = 0
    for pos, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            hits += 1
            dcg += 1.0 / math.log2(pos + 1)
    idcg = sum(1.0 / math.log2(p + 1) for p in range(1, min(k, len(relevant)) + 1))
    return MetricSet(dcg / idcg, hits / len(relevant), hits / k, 1.0 if hits else 0.0, k)


def mean_metrics(values: Iterable[MetricSet], k: int) -> MetricSet | None:
    values = list(values)
    if not values:
        return None
    n = len(values)
    return MetricSet(sum(v.ndcg for v in values) / n, sum(v.recall for v in values) / n,
                     sum(v.precision for v in values) / n, sum(v.hit_ratio for v in values) / n, k)


@dataclass
class EvalReport:
    per_user: dict[EntityId, MetricSet]
    mean: MetricSet | None
    k: int
    config: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.per_user)

    @property
    def empty(self) -> bool:
        return not self.per_user

    def values(self, metric: str) -> np.ndarray:
        """Per-user values of ``metric`` in user order, for paired tests."""
        return np.array([getattr(self.per_user[u], metric) for u in sorted(self.per_user)])


def evaluate(model: EmbeddingModel, split: SplitResult, k: int = 10, config: dict | None = None) -> EvalReport:
    """Rank every test user's unseen items and score against held-out purchases."""
    train_graph = split.train_graph
    if not model.matches_vocab(train_graph):
        raise VocabularyMismatch("model vocabulary differs from the split's graph")
    per_user = {}
    for user in sorted(split.test_purchases):
        relevant = split.test_purchases[user]
        if not relevant:
            continue
        ranked = top_n(model, user, k, exclude=train_graph.purchases(user))
        per_user[user] = metrics_at_k(ranked.item_ids(), relevant, k)
    return EvalReport(per_user, mean_metrics(per_user.values(), k), k, dict(config or {}))


def random_baseline(split: SplitResult, k: int = 10) -> MetricSet | None:
    """Expected metrics of a uniformly random ranking over each user's candidates."""
    n_items = split.train_graph.vocab_size(RelationType.PURCHASE.tail)
    out = []
    for user in sorted(split.test_purchases):
        relevant = set(split.test_purchases[user])
        if not relevant:
            continue
        n = n_items - len(set(split.train_graph.purchases(user)))
        h = len(relevant)
        depth = min(k, n)
        miss_all = math.comb(n - h, depth) / math.comb(n, depth)
        idcg = sum(1.0 / math.log2(p + 1) for p in range(1, min(k, h) + 1))
        dcg = sum((h / n) / math.log2(p + 1) for p in range(1, depth + 1))
        out.append(MetricSet(dcg / idcg, depth / n, depth * h / n / k, 1.0 - miss_all, k))
    return mean_metrics(out, k)


# -- significance -------------------------------------------------------

@dataclass
class SignificanceResult:
    p_value: float
    iterations: int
    observed_difference: float
    exact: bool


def fisher_randomization(a, b, iterations: int = 100_000, seed: int = 0,
                         exact: bool | None = None) -> SignificanceResult:
    """Two-sided paired sign-flip test on ``mean(a - b)``.

    Up to ``EXACT_LIMIT`` pairs every sign pattern is enumerated and the
    p-value is exact; otherwise ``iterations`` random patterns are drawn and
    the add-one estimate ``(c + 1) / (iterations + 1)`` is returned.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired samples differ in shape: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise LengthMismatch("need at least one pair")
    diff = a - b
    n = diff.size
    observed = float(diff.mean())
    # relative slack so sign patterns that tie the observed value count as extreme
    threshold = abs(observed) * (1 - 1e-12) - 1e-15
    if exact is None:
        exact = n <= EXACT_LIMIT
    if exact:
        if n > 24:
            raise ValueError("exact enumeration limited to 24 pairs")
        patterns = np.arange(2 ** n, dtype=np.int64)
        signs = 1 - 2 * ((patterns[:, None] >> np.arange(n)) & 1)
        means = (signs * diff).mean(axis=1)
        count = int(np.count_nonzero(np.abs(means) >= threshold))
        return SignificanceResult(count / 2 ** n, 2 ** n, observed, True)
    rng = rng_for(seed, "significance")
    count = 0
    chunk = max(1, min(iterations, 1_000_000 // max(n, 1)))
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        signs = rng.integers(0, 2, size=(m, n)) * 2 - 1
        means = (signs * diff).mean(axis=1)
        count += int(np.count_nonzero(np.abs(means) >= threshold))
        done += m
    return SignificanceResult((count + 1) / (iterations + 1), iterations, observed, False)


# -- ablation -----------------------------------------------------------

def run_ablation(kg: KnowledgeGraph, relation_sets: Sequence[Iterable[RelationType]],
                 hp: Hyperparams, k: int = 10, ratio: float = 0.7,
                 backend: str | None = None) -> list[EvalReport]:
    """Filter, split (same seed for every subset), train and evaluate per subset."""
    reports = []
    for rels in relation_sets:
        rels = frozenset(rels)
        sub = filter_relations(kg, rels)
        split = split_train_test(sub, ratio, hp.seed)
        model, _ = train(split.train_graph, hp, backend=backend)
        config = {"relations": sorted(r.wire for r in rels), "dim": hp.dim, "seed": hp.seed}
        reports.append(evaluate(model, split, k, config))
    return reports


# -- report output ------------------------------------------------------

COLUMNS = (("NDCG", "ndcg"), ("Recall", "recall"), ("HR", "hit_ratio"), ("Prec.", "precision"))


def write_report_tsv(reports: Sequence[tuple[str, EvalReport]], out: TextIO) -> None:
    out.write("run\tusers\t" + "\t".join(c for c, _ in COLUMNS) + "\n")
    for name, rep in reports:
        if rep.mean is None:
            out.write(f"{name}\t0" + "\tNA" * len(COLUMNS) + "\n")
            continue
        vals = "\t".join(f"{100 * getattr(rep.mean, attr):.3f}" for _, attr in COLUMNS)
        out.write(f"{name}\t{rep.n_users}\t{vals}\n")


def format_table(reports: Sequence[tuple[str, EvalReport]]) -> str:
    """Table with percentage columns in NDCG, Recall, HR, Prec. order."""
    name_w = max([len("run")] + [len(n) for n, _ in reports])
    k = reports[0][1].k if reports else 10
    head = f"{'run':<{name_w}}  {'users':>6}  " + "  ".join(f"{c + '@' + str(k):>9}" for c, _ in COLUMNS)
    lines = [head, "-" * len(head)]
    for name, rep in reports:
        if rep.mean is None:
            cells = "  ".join(f"{'n/a':>9}" for _ in COLUMNS)
        else:
            cells = "  ".join(f"{100 * getattr(rep.mean, a):>9.3f}" for _, a in COLUMNS)
        lines.append(f"{name:<{name_w}}  {rep.n_users:>6}  {cells}")
    return "\n".join(lines)
