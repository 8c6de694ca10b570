"""Explanation paths between a user and a recommended item.

Candidate paths come from breadth-first search over observed triplets; each
reached entity is then scored by soft matching in embedding space, i.e. a
softmax over the whole vocabulary of the path's terminal type. A user-item
explanation meets at an entity reachable from both sides and is scored by
the product of the two soft-match probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

from .errors import SchemaViolation, UnknownEntity
from .graph import EntityId, EntityType, KnowledgeGraph, RelationType, relations_from
from .model import EmbeddingModel, check_chain, softmax_scores, trans

REL = RelationType
Edge = tuple[EntityId, RelationType, EntityId]


@dataclass
class ReachSet:
    start: EntityId
    depth: int
    prob: dict[EntityId, float] = field(default_factory=dict)
    rels: dict[EntityId, tuple[RelationType, ...]] = field(default_factory=dict)

    @property
    def entities(self) -> set[EntityId]:
        return set(self.prob)


@dataclass(frozen=True)
class ExplanationPath:
    user: EntityId
    item: EntityId
    via: EntityId
    user_rels: tuple[RelationType, ...]
    item_rels: tuple[RelationType, ...]
    user_prob: float
    item_prob: float

    @property
    def probability(self) -> float:
        return self.user_prob * self.item_prob


def _require(kg: KnowledgeGraph, model: EmbeddingModel, e: EntityId) -> None:
    if not kg.has_entity(e):
        raise UnknownEntity(f"{e!r} is not in the graph")
    model.row(e)


def bfs_reach(kg: KnowledgeGraph, model: EmbeddingModel, start: EntityId, z: int,
              skip_edges: Sequence[Edge] = ()) -> ReachSet:
    """Entities reachable from ``start`` in 1..z observed hops, soft-match scored.

    Every relation sequence realised by observed triplets is expanded. An
    entity reached by several sequences keeps the one giving it the highest
    probability; ties keep the earlier (shorter, then enum-ordered) sequence.
    """
    if z < 1:
        raise ValueError("z must be >= 1")
    _require(kg, model, start)
    skip = set(skip_edges)
    out = ReachSet(start, z)
    frontier: dict[tuple[RelationType, ...], set[EntityId]] = {(): {start}}
    for _ in range(z):
        grown: dict[tuple[RelationType, ...], set[EntityId]] = {}
        for seq in sorted(frontier):
            here = seq[-1].tail if seq else start.type
            for r in relations_from(here):
                reached = set()
                for e in frontier[seq]:
                    for t in kg.tails(e, r):
                        if (e, r, t) not in skip:
                            reached.add(t)
                if reached:
                    grown[seq + (r,)] = reached
        for seq in sorted(grown):
            probs = softmax_scores(model, trans(model, start, seq), seq[-1].tail)
            for e in sorted(grown[seq]):
                p = float(probs[e.index])
                if p > out.prob.get(e, -1.0):
                    out.prob[e] = p
                    out.rels[e] = seq
        frontier = grown
        if not frontier:
            break
    return out


def side_probability(model: EmbeddingModel, start: EntityId, rels: Sequence[RelationType],
                     target: EntityId) -> float:
    if not rels:
        raise SchemaViolation("explanation paths need at least one relation per side")
    if check_chain(start.type, rels) is not target.type:
        raise SchemaViolation(f"relation chain does not end at a {target.type.wire}")
    probs = softmax_scores(model, trans(model, start, rels), target.type)
    return float(probs[target.index])


def path_probability(model: EmbeddingModel, user: EntityId, user_rels: Sequence[RelationType],
                     item: EntityId, item_rels: Sequence[RelationType], via: EntityId) -> float:
    """Soft-match probability of ``via`` from the user side times from the item side."""
    return side_probability(model, user, user_rels, via) * side_probability(model, item, item_rels, via)


def best_explanation(kg: KnowledgeGraph, model: EmbeddingModel, user: EntityId, item: EntityId,
                     z_max: int = 2, incremental: bool = True) -> list[ExplanationPath]:
    """All meeting-point paths, best first.

    With ``incremental`` the depth grows from 1 and stops at the first depth
    whose reach sets intersect; otherwise only depth ``z_max`` is searched.
    The user's own purchase edge to ``item`` is never used.
    """
    if user.type is not EntityType.USER:
        raise SchemaViolation(f"expected a user, got {user.type.wire}")
    if item.type is not EntityType.ITEM:
        raise SchemaViolation(f"expected an item, got {item.type.wire}")
    _require(kg, model, user)
    _require(kg, model, item)
    depths = range(1, z_max + 1) if incremental else [z_max]
    skip = [(user, REL.PURCHASE, item)]
    for z in depths:
        from_user = bfs_reach(kg, model, user, z, skip)
        from_item = bfs_reach(kg, model, item, z)
        common = from_user.entities & from_item.entities
        if not common:
            continue
        paths = [ExplanationPath(user, item, e, from_user.rels[e], from_item.rels[e],
                                 from_user.prob[e], from_item.prob[e]) for e in common]
        paths.sort(key=lambda p: (-p.probability, p.via))
        return paths
    return []


# -- templates ----------------------------------------------------------

USER_PHRASES = {
    (REL.MENTION,): "mentions {x} in their reviews",
    (REL.PURCHASE,): "purchases {x}",
    (REL.PURCHASE, REL.BOUGHT_TOGETHER): "purchases items that are bought with {x} together",
    (REL.PURCHASE, REL.ALSO_BOUGHT): "purchases items whose buyers also bought {x}",
    (REL.PURCHASE, REL.ALSO_VIEWED): "purchases items viewed together with {x}",
    (REL.PURCHASE, REL.BELONGS_TO): "purchases items related to the category {x}",
    (REL.PURCHASE, REL.PRODUCED_BY): "purchases products produced by {x}",
    (REL.PURCHASE, REL.MENTION): "purchases items whose reviews mention {x}",
}

ITEM_PHRASES = {
    (REL.MENTION,): "{x} is often mentioned in the reviews of {item}",
    (REL.BOUGHT_TOGETHER,): "{item} is also frequently bought with {x} together",
    (REL.ALSO_BOUGHT,): "{item} is also often bought by buyers of {x}",
    (REL.ALSO_VIEWED,): "{item} is often viewed together with {x}",
    (REL.BELONGS_TO,): "{item} belongs to the category {x}",
    (REL.PRODUCED_BY,): "{item} is also produced by {x}",
}


def _display(e: EntityId, key: str) -> str:
    return f"'{key}'" if e.type is EntityType.WORD else key


def render_explanation(path: ExplanationPath, resolve: Callable[[EntityId], str]) -> str:
    """One-sentence explanation; ``resolve`` maps entities to display keys."""
    item = resolve(path.item)
    x = _display(path.via, resolve(path.via))
    user_phrase = USER_PHRASES.get(tuple(path.user_rels))
    item_phrase = ITEM_PHRASES.get(tuple(path.item_rels))
    if user_phrase is None or item_phrase is None:
        ua = "+".join(r.wire for r in path.user_rels)
        ib = "+".join(r.wire for r in path.item_rels)
        return f"{item} is recommended because the user is linked via {x} through {ua} and {ib}"
    return (f"{item} is recommended because the user often {user_phrase.format(x=x)}, "
            f"and {item_phrase.format(x=x, item=item)}")


def write_explanations_tsv(kg: KnowledgeGraph, paths: Sequence[ExplanationPath], out: TextIO) -> None:
    for rank, p in enumerate(paths, start=1):
        out.write("\t".join([
            kg.key_of(p.user), kg.key_of(p.item), str(rank), repr(p.probability),
            f"{p.via.type.wire}:{kg.key_of(p.via)}",
            ",".join(r.wire for r in p.user_rels), ",".join(r.wire for r in p.item_rels),
            render_explanation(p, kg.key_of),
        ]) + "\n")


def write_explanations_text(kg: KnowledgeGraph, user: EntityId, item: EntityId,
                            paths: Sequence[ExplanationPath], out: TextIO) -> None:
    out.write(f"{kg.key_of(user)} -> {kg.key_of(item)}\n")
    if not paths:
        out.write("  (no explanation path found)\n")
    for rank, p in enumerate(paths, start=1):
        out.write(f"  {rank}. [{100 * p.user_prob:.2f}% x {100 * p.item_prob:.2f}% = "
                  f"{100 * p.probability:.2f}%] {render_explanation(p, kg.key_of)}\n")
