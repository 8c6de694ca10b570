"""Top-N item ranking through the purchase translation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np

from .errors import SchemaViolation
from .graph import EntityId, EntityType, RelationType
from .model import EmbeddingModel


@dataclass
class RankedList:
    user: EntityId
    items: list[tuple[EntityId, float]]
    cutoff: int

    def item_ids(self) -> list[EntityId]:
        return [i for i, _ in self.items]


def score_items(model: EmbeddingModel, user: EntityId) -> np.ndarray:
    """``e_i . (e_u + r_purchase)`` for every item, indexed by item index.

    The softmax over items is monotone in this logit, so it is skipped.
    """
    if user.type is not EntityType.USER:
        raise SchemaViolation(f"expected a user, got {user.type.wire}")
    query = model.vector(user).astype(np.float64) + model.relation_vector(RelationType.PURCHASE)
    return model.entity_matrix(EntityType.ITEM).astype(np.float64) @ query


def rank_scores(scores: np.ndarray, n: int, exclude: Iterable[int] = ()) -> np.ndarray:
    """Indices of the ``n`` best scores, ties to the lower index."""
    if n < 1:
        raise ValueError("n must be >= 1")
    keep = np.ones(scores.size, dtype=bool)
    excluded = np.fromiter(exclude, dtype=np.int64)
    keep[excluded] = False
    cand = np.flatnonzero(keep)
    order = np.argsort(-scores[cand], kind="stable")
    return cand[order[:n]]


def top_n(model: EmbeddingModel, user: EntityId, n: int = 10,
          exclude: Iterable[EntityId] = ()) -> RankedList:
    scores = score_items(model, user)
    idx = rank_scores(scores, n, (e.index for e in exclude if e.type is EntityType.ITEM))
    items = [(EntityId(EntityType.ITEM, int(i)), float(scores[i])) for i in idx]
    return RankedList(user, items, n)


def write_rankings(model: EmbeddingModel, rankings: Iterable[RankedList], out: TextIO) -> None:
    for ranked in rankings:
        user_key = model.key_of(ranked.user)
        for rank, (item, score) in enumerate(ranked.items, start=1):
            out.write(f"{user_key}\t{rank}\t{model.key_of(item)}\t{score!r}\n")
