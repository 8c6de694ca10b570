"""Alias-table sampling of negative tails."""
from __future__ import annotations

import numpy as np


class AliasTable:
    """Vose's alias method: O(n) build, O(1) per draw.

    Zero-weight outcomes are never drawn.
    """

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty 1-d array")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights must not all be zero")
        n = w.size
        self.probabilities = w / total
        scaled = self.probabilities * n
        prob = np.ones(n)
        alias = np.arange(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        # leftovers are 1 up to rounding
        for i in small + large:
            prob[i] = 1.0
            alias[i] = i
        # a zero-weight slot may survive as a rounding leftover; never emit it
        zero = self.probabilities == 0
        if zero.any():
            prob[zero & (alias == np.arange(n))] = 0.0
            fix = zero & (alias == np.arange(n))
            alias[fix] = int(np.argmax(self.probabilities))
        self.prob = prob
        self.alias = alias

    def __len__(self):
        return self.prob.size

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        n = self.prob.size
        slot = rng.integers(0, n, size=size)
        coin = rng.random(size=size)
        return np.where(coin < self.prob[slot], slot, self.alias[slot])


class NoiseDistribution:
    """Per-relation distribution over tail-vocabulary indices."""

    def __init__(self, relation, weights):
        self.relation = relation
        self.table = AliasTable(weights)

    @property
    def probabilities(self) -> np.ndarray:
        return self.table.probabilities

    def __len__(self):
        return len(self.table)

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        """Local tail indices, i.i.d. with replacement."""
        return self.table.sample(size, rng)


def sample_negatives(dist: NoiseDistribution, k: int, rng: np.random.Generator):
    """``k`` tail entities drawn from ``dist``; the positive tail is not excluded."""
    from .graph import EntityId

    if k < 0:
        raise ValueError("k must be non-negative")
    tail_type = dist.relation.tail
    return [EntityId(tail_type, int(i)) for i in dist.sample(k, rng)]
