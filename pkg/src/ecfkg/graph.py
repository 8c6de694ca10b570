"""Typed user-item knowledge graph.

Entities live in one dense vocabulary per :class:`EntityType`. Triplets are
kept as a multiset: adding the same fact twice doubles its count, because
the training objective weighs each fact by how often it was observed.
"""
from __future__ import annotations

import enum
import math
from collections import Counter, defaultdict
from typing import Iterable, Iterator, NamedTuple, TextIO

import numpy as np

from .errors import (
    EmptyVocabulary,
    GraphFrozen,
    InsufficientPurchases,
    MissingPurchase,
    ParseError,
    SchemaViolation,
    UnknownEntity,
)
from .sampling import NoiseDistribution
from .seeding import rng_for


class EntityType(enum.IntEnum):
    USER = 0
    ITEM = 1
    WORD = 2
    BRAND = 3
    CATEGORY = 4

    @property
    def wire(self) -> str:
        return self.name.lower()

    @classmethod
    def from_wire(cls, name: str) -> "EntityType":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown entity type {name!r}") from None


_U, _I, _W, _B, _C = EntityType


class RelationType(enum.IntEnum):
    PURCHASE = 0
    MENTION = 1
    BELONGS_TO = 2
    PRODUCED_BY = 3
    BOUGHT_TOGETHER = 4
    ALSO_BOUGHT = 5
    ALSO_VIEWED = 6

    @property
    def wire(self) -> str:
        return self.name.lower()

    @classmethod
    def from_wire(cls, name: str) -> "RelationType":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown relation {name!r}") from None

    @property
    def heads(self) -> tuple[EntityType, ...]:
        return tuple(e.head for e in SCHEMA if e.relation is self)

    @property
    def tail(self) -> EntityType:
        return _TAILS[self]


class SchemaEntry(NamedTuple):
    name: str
    relation: RelationType
    head: EntityType
    tail: EntityType


# Mention has two head types; both entries share the one Mention relation vector.
SCHEMA: tuple[SchemaEntry, ...] = (
    SchemaEntry("purchase", RelationType.PURCHASE, _U, _I),
    SchemaEntry("user_mention", RelationType.MENTION, _U, _W),
    SchemaEntry("item_mention", RelationType.MENTION, _I, _W),
    SchemaEntry("belongs_to", RelationType.BELONGS_TO, _I, _C),
    SchemaEntry("produced_by", RelationType.PRODUCED_BY, _I, _B),
    SchemaEntry("bought_together", RelationType.BOUGHT_TOGETHER, _I, _I),
    SchemaEntry("also_bought", RelationType.ALSO_BOUGHT, _I, _I),
    SchemaEntry("also_viewed", RelationType.ALSO_VIEWED, _I, _I),
)
_TAILS = {e.relation: e.tail for e in SCHEMA}

ALL_RELATIONS = frozenset(RelationType)


def relations_from(entity_type: EntityType) -> list[RelationType]:
    """Relations whose head may be of ``entity_type``, in enum order."""
    return [r for r in RelationType if entity_type in r.heads]


class EntityId(NamedTuple):
    type: EntityType
    index: int

    def __repr__(self):
        return f"{self.type.wire}#{self.index}"


class Triplet(NamedTuple):
    head: EntityId
    tail: EntityId
    relation: RelationType


def check_schema(t: Triplet) -> None:
    r = t.relation
    if t.head.type not in r.heads:
        raise SchemaViolation(
            f"{r.wire} head must be {'/'.join(h.wire for h in r.heads)}, got {t.head.type.wire}"
        )
    if t.tail.type is not r.tail:
        raise SchemaViolation(f"{r.wire} tail must be {r.tail.wire}, got {t.tail.type.wire}")


class KnowledgeGraph:
    """Vocabularies plus a triplet multiset with frequency indexes.

    Build with :meth:`register` and :meth:`add_triplet`, then :meth:`freeze`.
    A frozen graph rejects further writes and can be shared between readers.
    """

    def __init__(self):
        self._keys: dict[EntityType, list[str]] = {t: [] for t in EntityType}
        self._index: dict[EntityType, dict[str, int]] = {t: {} for t in EntityType}
        self._triplets: list[Triplet] = []
        self._cnt_hrt: Counter = Counter()
        self._cnt_hr: Counter = Counter()
        self._adj: dict[tuple[EntityId, RelationType], list[EntityId]] = defaultdict(list)
        self._tail_cnt: dict[RelationType, Counter] = {r: Counter() for r in RelationType}
        self._rel_cnt: Counter = Counter()
        self._frozen = False
        self._arrays = None

    # -- vocabularies -------------------------------------------------
    def register(self, entity_type: EntityType, key: str) -> EntityId:
        index = self._index[entity_type].get(key)
        if index is None:
            if self._frozen:
                raise GraphFrozen("cannot register entities on a frozen graph")
            index = len(self._keys[entity_type])
            self._keys[entity_type].append(key)
            self._index[entity_type][key] = index
        return EntityId(entity_type, index)

    def entity(self, entity_type: EntityType, key: str) -> EntityId:
        try:
            return EntityId(entity_type, self._index[entity_type][key])
        except KeyError:
            raise UnknownEntity(f"no {entity_type.wire} with key {key!r}") from None

    def has_entity(self, e: EntityId) -> bool:
        return 0 <= e.index < len(self._keys[e.type])

    def key_of(self, e: EntityId) -> str:
        if not self.has_entity(e):
            raise UnknownEntity(f"{e!r} is not registered")
        return self._keys[e.type][e.index]

    def vocab(self, entity_type: EntityType) -> list[str]:
        return list(self._keys[entity_type])

    def vocab_size(self, entity_type: EntityType) -> int:
        return len(self._keys[entity_type])

    def vocab_sizes(self) -> tuple[int, ...]:
        return tuple(len(self._keys[t]) for t in EntityType)

    def entities(self, entity_type: EntityType) -> list[EntityId]:
        return [EntityId(entity_type, i) for i in range(len(self._keys[entity_type]))]

    # -- triplets -----------------------------------------------------
    def add_triplet(self, t: Triplet) -> None:
        if self._frozen:
            raise GraphFrozen("cannot add triplets to a frozen graph")
        check_schema(t)
        for e in (t.head, t.tail):
            if not self.has_entity(e):
                raise UnknownEntity(f"{e!r} is not registered")
        self._triplets.append(t)
        self._cnt_hrt[t.head, t.relation, t.tail] += 1
        self._cnt_hr[t.head, t.relation] += 1
        self._adj[t.head, t.relation].append(t.tail)
        self._tail_cnt[t.relation][t.tail.index] += 1
        self._rel_cnt[t.relation] += 1

    def add(self, head: tuple[EntityType, str], relation: RelationType,
            tail: tuple[EntityType, str]) -> Triplet:
        """Register both endpoints by key and add the triplet."""
        t = Triplet(self.register(*head), self.register(*tail), relation)
        self.add_triplet(t)
        return t

    def freeze(self) -> "KnowledgeGraph":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def __len__(self) -> int:
        return len(self._triplets)

    def __iter__(self) -> Iterator[Triplet]:
        return iter(self._triplets)

    def triplets(self) -> list[Triplet]:
        return list(self._triplets)

    def count(self, head: EntityId, relation: RelationType, tail: EntityId | None = None) -> int:
        if tail is None:
            return self._cnt_hr.get((head, relation), 0)
        return self._cnt_hrt.get((head, relation, tail), 0)

    def count_items(self):
        """``((head, relation, tail), count)`` pairs over distinct triplets."""
        return self._cnt_hrt.items()

    def head_relation_counts(self):
        return self._cnt_hr.items()

    def tails(self, head: EntityId, relation: RelationType) -> list[EntityId]:
        """Observed tails of ``(head, relation)`` with repeats, insertion order."""
        return list(self._adj.get((head, relation), ()))

    def relation_count(self, relation: RelationType) -> int:
        return self._rel_cnt.get(relation, 0)

    def tail_counts(self, relation: RelationType) -> np.ndarray:
        """Number of triplets with ``relation`` ending at each tail index."""
        out = np.zeros(self.vocab_size(relation.tail), dtype=np.int64)
        for idx, c in self._tail_cnt[relation].items():
            out[idx] = c
        return out

    def purchases(self, user: EntityId) -> list[EntityId]:
        return self.tails(user, RelationType.PURCHASE)

    # -- flat layout used by the training kernels ---------------------
    def offsets(self) -> np.ndarray:
        """Row offset of each entity type in a type-ordered flat table."""
        sizes = np.array(self.vocab_sizes(), dtype=np.int64)
        return np.concatenate([[0], np.cumsum(sizes)[:-1]])

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(heads, relations, tails)`` as flat int64 arrays in insertion order."""
        if self._arrays is not None and self._frozen:
            return self._arrays
        off = self.offsets()
        n = len(self._triplets)
        h = np.empty(n, dtype=np.int64)
        r = np.empty(n, dtype=np.int64)
        t = np.empty(n, dtype=np.int64)
        for j, (head, tail, rel) in enumerate(self._triplets):
            h[j] = off[head.type] + head.index
            r[j] = rel
            t[j] = off[tail.type] + tail.index
        arrays = (h, r, t)
        if self._frozen:
            self._arrays = arrays
        return arrays

    def empty_like(self) -> "KnowledgeGraph":
        """A fresh unfrozen graph with the same vocabularies and no triplets."""
        g = KnowledgeGraph()
        for t in EntityType:
            g._keys[t] = list(self._keys[t])
            g._index[t] = dict(self._index[t])
        return g

    def __repr__(self):
        sizes = ", ".join(f"{t.wire}={n}" for t, n in zip(EntityType, self.vocab_sizes()))
        return f"<KnowledgeGraph {sizes} triplets={len(self)}{' frozen' if self._frozen else ''}>"


def add_triplet(kg: KnowledgeGraph, t: Triplet) -> KnowledgeGraph:
    kg.add_triplet(t)
    return kg


def tail_candidates(kg: KnowledgeGraph, relation: RelationType) -> list[EntityId]:
    return kg.entities(relation.tail)


class SplitResult(NamedTuple):
    train_graph: KnowledgeGraph
    test_purchases: dict[EntityId, list[EntityId]]


def split_train_test(kg: KnowledgeGraph, ratio: float = 0.7, seed: int = 0) -> SplitResult:
    """Hold out purchases per user; ``ceil(ratio * n)`` of each user's stay in train.

    Non-purchase triplets all remain in the training graph. Every user with
    purchases must have at least two of them.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    rng = rng_for(seed, "split")
    by_user: dict[EntityId, list[int]] = defaultdict(list)
    for j, t in enumerate(kg):
        if t.relation is RelationType.PURCHASE:
            by_user[t.head].append(j)
    held_out: set[int] = set()
    test: dict[EntityId, list[EntityId]] = {}
    for user in sorted(by_user):
        rows = by_user[user]
        if len(rows) < 2:
            raise InsufficientPurchases(kg.key_of(user), len(rows))
        n_train = math.ceil(ratio * len(rows))
        perm = rng.permutation(len(rows))
        test_rows = sorted(rows[i] for i in perm[n_train:])
        if test_rows:
            held_out.update(test_rows)
            test[user] = [kg._triplets[j].tail for j in test_rows]
    train = kg.empty_like()
    for j, t in enumerate(kg):
        if j not in held_out:
            train.add_triplet(t)
    return SplitResult(train.freeze(), test)


def filter_relations(kg: KnowledgeGraph, keep: Iterable[RelationType]) -> KnowledgeGraph:
    keep = frozenset(keep)
    if RelationType.PURCHASE not in keep:
        raise MissingPurchase("relation subset must include purchase")
    out = kg.empty_like()
    for t in kg:
        if t.relation in keep:
            out.add_triplet(t)
    return out.freeze()


def noise_distribution(kg: KnowledgeGraph, relation: RelationType) -> NoiseDistribution:
    """Negative-sampling distribution over the tail vocabulary of ``relation``.

    Uniform for purchases; otherwise proportional to how often each tail
    appears under ``relation``, with unseen tails at zero.
    """
    n = kg.vocab_size(relation.tail)
    if n == 0:
        raise EmptyVocabulary(f"no {relation.tail.wire} entities for {relation.wire}")
    if relation is RelationType.PURCHASE:
        weights = np.ones(n)
    else:
        weights = kg.tail_counts(relation).astype(np.float64)
        if weights.sum() == 0:
            raise EmptyVocabulary(f"no observed {relation.wire} tails")
    return NoiseDistribution(relation, weights)


# -- triplet TSV --------------------------------------------------------

def _parse_endpoint(field: str, line_no: int) -> tuple[EntityType, str]:
    type_name, sep, key = field.partition(":")
    if not sep or not key:
        raise ParseError(f"expected '<type>:<key>', got {field!r}", line_no)
    try:
        return EntityType.from_wire(type_name), key
    except ValueError as exc:
        raise ParseError(str(exc), line_no) from None


def read_triplets(lines: Iterable[str], kg: KnowledgeGraph | None = None) -> KnowledgeGraph:
    """Parse ``<type>:<key>\\t<relation>\\t<type>:<key>`` lines into a frozen graph."""
    kg = KnowledgeGraph() if kg is None else kg
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", line_no)
        head = _parse_endpoint(fields[0], line_no)
        try:
            relation = RelationType.from_wire(fields[1])
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
        tail = _parse_endpoint(fields[2], line_no)
        # validate before registering so a bad line leaves no stray vocabulary
        if head[0] not in relation.heads or tail[0] is not relation.tail:
            try:
                check_schema(Triplet(EntityId(head[0], 0), EntityId(tail[0], 0), relation))
            except SchemaViolation as exc:
                raise SchemaViolation(str(exc), line_no) from None
        kg.add(head, relation, tail)
    return kg.freeze()


def write_triplets(kg: KnowledgeGraph, out: TextIO) -> None:
    for h, t, r in kg:
        out.write(f"{h.type.wire}:{kg.key_of(h)}\t{r.wire}\t{t.type.wire}:{kg.key_of(t)}\n")
