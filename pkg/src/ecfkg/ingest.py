"""Building knowledge graphs from triplet files, review corpora, or a generator."""
from __future__ import annotations

import ast
import gzip
import io
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, ParseError
from .graph import EntityType, KnowledgeGraph, RelationType, Triplet, read_triplets, write_triplets
from .seeding import rng_for

U, I, W, B, C = EntityType
REL = RelationType


def parse_triplets(lines: Iterable[str]) -> KnowledgeGraph:
    return read_triplets(lines)


def load_triplets(path) -> KnowledgeGraph:
    with open_text(path) as fh:
        return read_triplets(fh)


def open_text(path, mode="rt"):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode, encoding="utf-8")
    return open(path, mode, encoding="utf-8")


# -- review corpora -----------------------------------------------------

@dataclass
class ReviewRecord:
    user_key: str
    item_key: str
    review_text: str = ""

    def __post_init__(self):
        if not self.user_key or not self.item_key:
            raise ValueError("review needs non-empty user and item keys")


@dataclass
class ItemMetadata:
    item_key: str
    brand: str | None = None
    categories: list[str] = field(default_factory=list)
    bought_together: list[str] = field(default_factory=list)
    also_bought: list[str] = field(default_factory=list)
    also_viewed: list[str] = field(default_factory=list)


@dataclass
class VocabConfig:
    min_word_count: int = 1
    max_vocab_size: int = 1_000_000
    lowercase: bool = True

    def __post_init__(self):
        if self.min_word_count < 1:
            raise ConfigError("min_word_count must be >= 1")
        if self.max_vocab_size < 1:
            raise ConfigError("max_vocab_size must be >= 1")


_TOKEN = re.compile(r"[^\W_]+")


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    if lowercase:
        text = text.lower()
    return _TOKEN.findall(text)


def build_vocab(token_lists: Iterable[list[str]], cfg: VocabConfig) -> set[str]:
    counts: Counter = Counter()
    first_seen: dict[str, int] = {}
    for tokens in token_lists:
        for tok in tokens:
            counts[tok] += 1
            first_seen.setdefault(tok, len(first_seen))
    eligible = [w for w, c in counts.items() if c >= cfg.min_word_count]
    eligible.sort(key=lambda w: (-counts[w], first_seen[w]))
    return set(eligible[:cfg.max_vocab_size])


def build_from_reviews(reviews: list[ReviewRecord], meta: Iterable[ItemMetadata] = (),
                       cfg: VocabConfig | None = None) -> KnowledgeGraph:
    """One purchase per review, mentions per token occurrence, relations from metadata.

    Metadata for items that never appear in a review is ignored, as are related
    items outside the reviewed set.
    """
    cfg = cfg or VocabConfig()
    tokenized = [tokenize(r.review_text, cfg.lowercase) for r in reviews]
    vocab = build_vocab(tokenized, cfg)
    kg = KnowledgeGraph()
    for review, tokens in zip(reviews, tokenized):
        user = (U, review.user_key)
        item = (I, review.item_key)
        kg.add(user, REL.PURCHASE, item)
        kept = [t for t in tokens if t in vocab]
        for tok in kept:
            kg.add(user, REL.MENTION, (W, tok))
        for tok in kept:
            kg.add(item, REL.MENTION, (W, tok))

    items = set(kg.vocab(I))
    for m in meta:
        if m.item_key not in items:
            continue
        item = (I, m.item_key)
        if m.brand:
            kg.add(item, REL.PRODUCED_BY, (B, m.brand))
        for cat in m.categories:
            kg.add(item, REL.BELONGS_TO, (C, cat))
        for rel, others in ((REL.BOUGHT_TOGETHER, m.bought_together),
                            (REL.ALSO_BOUGHT, m.also_bought),
                            (REL.ALSO_VIEWED, m.also_viewed)):
            for other in others:
                if other in items:
                    kg.add(item, rel, (I, other))
    return kg.freeze()


def _loads(line: str, line_no: int):
    try:
        return json.loads(line)
    except json.JSONDecodeError:
        pass
    # older Amazon metadata dumps are Python dict literals
    try:
        return ast.literal_eval(line)
    except (ValueError, SyntaxError):
        raise ParseError("not a JSON object", line_no) from None


def iter_records(lines: Iterable[str]) -> Iterator[tuple[int, dict]]:
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        obj = _loads(line, line_no)
        if not isinstance(obj, dict):
            raise ParseError("not a JSON object", line_no)
        yield line_no, obj


def read_reviews(lines: Iterable[str]) -> list[ReviewRecord]:
    out = []
    for line_no, obj in iter_records(lines):
        user, item = obj.get("reviewerID"), obj.get("asin")
        if not user or not item:
            raise ParseError("review needs 'reviewerID' and 'asin'", line_no)
        out.append(ReviewRecord(str(user), str(item), str(obj.get("reviewText") or "")))
    return out


def _flatten_categories(value) -> list[str]:
    out: list[str] = []
    stack = [value]
    while stack:
        v = stack.pop(0)
        if isinstance(v, str):
            if v and v not in out:
                out.append(v)
        elif isinstance(v, (list, tuple)):
            stack[0:0] = list(v)
    return out


def read_metadata(lines: Iterable[str]) -> list[ItemMetadata]:
    out = []
    for line_no, obj in iter_records(lines):
        item = obj.get("asin")
        if not item:
            raise ParseError("metadata needs 'asin'", line_no)
        related = obj.get("related") or {}
        out.append(ItemMetadata(
            str(item),
            brand=(str(obj["brand"]).strip() or None) if obj.get("brand") else None,
            categories=_flatten_categories(obj.get("categories") or []),
            bought_together=list(related.get("bought_together") or []),
            also_bought=list(related.get("also_bought") or []),
            also_viewed=list(related.get("also_viewed") or []),
        ))
    return out


# -- synthetic graphs ---------------------------------------------------

@dataclass
class SyntheticConfig:
    """Planted-cluster graph parameters.

    Users, items, brands and categories are dealt round-robin into
    ``cluster_count`` clusters, and words round-robin onto brands. Each user
    favours one brand of their cluster. An in-cluster item's purchase weight is
    ``rank ** -popularity_exponent``, times ``brand_preference`` when it is
    made by the user's favourite brand; out-of-cluster picks are uniform.
    """

    num_users: int = 200
    num_items: int = 200
    num_brands: int = 16
    num_categories: int = 4
    num_words: int = 64
    cluster_count: int = 4
    purchases_per_user: int = 10
    within_cluster_affinity: float = 0.9
    popularity_exponent: float = 1.0
    brand_preference: float = 10.0
    words_per_purchase: int = 2
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_users", "num_items", "cluster_count", "purchases_per_user"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("num_brands", "num_categories", "num_words", "words_per_purchase"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.5 < self.within_cluster_affinity <= 1.0:
            raise ConfigError("within_cluster_affinity must be in (0.5, 1]")
        if self.cluster_count > min(self.num_users, self.num_items):
            raise ConfigError("more clusters than users or items")
        smallest = self.num_items // self.cluster_count
        if self.purchases_per_user > smallest:
            raise ConfigError(
                f"purchases_per_user={self.purchases_per_user} exceeds smallest item cluster ({smallest})")
        if self.words_per_purchase and self.num_words == 0:
            raise ConfigError("words_per_purchase > 0 needs num_words > 0")
        if self.popularity_exponent < 0:
            raise ConfigError("popularity_exponent must be >= 0")
        if self.brand_preference < 1:
            raise ConfigError("brand_preference must be >= 1")


@dataclass
class ClusterAssignment:
    users: list[int]
    items: list[int]
    brands: list[int]
    categories: list[int]
    word_brands: list[int]
    user_brands: list[int] = field(default_factory=list)


def _members(n: int, clusters: int) -> list[int]:
    return [i % clusters for i in range(n)]


def _pick(rng, pool: np.ndarray, weights: np.ndarray | None, taken: set[int]) -> int | None:
    free = np.array([p not in taken for p in pool], dtype=bool)
    if not free.any():
        return None
    cand = pool[free]
    if weights is None:
        return int(cand[rng.integers(cand.size)])
    w = weights[free]
    return int(cand[rng.choice(cand.size, p=w / w.sum())])


def generate_synthetic(cfg: SyntheticConfig) -> tuple[KnowledgeGraph, ClusterAssignment]:
    cfg.validate()
    rng = rng_for(cfg.seed, "synth")
    k = cfg.cluster_count
    clusters = ClusterAssignment(
        users=_members(cfg.num_users, k), items=_members(cfg.num_items, k),
        brands=_members(cfg.num_brands, k), categories=_members(cfg.num_categories, k),
        word_brands=_members(cfg.num_words, max(cfg.num_brands, 1)),
    )
    kg = KnowledgeGraph()
    users = [kg.register(U, f"u{i}") for i in range(cfg.num_users)]
    items = [kg.register(I, f"i{i}") for i in range(cfg.num_items)]
    words = [kg.register(W, f"w{i}") for i in range(cfg.num_words)]
    brands = [kg.register(B, f"b{i}") for i in range(cfg.num_brands)]
    cats = [kg.register(C, f"c{i}") for i in range(cfg.num_categories)]

    item_cluster = np.array(clusters.items)

    def own(assign: list[int], c: int) -> list[int]:
        return [x for x, xc in enumerate(assign) if xc == c] or list(range(len(assign)))

    item_brand = np.full(cfg.num_items, -1)
    for i, item in enumerate(items):
        c = clusters.items[i]
        if brands:
            pool = own(clusters.brands, c)
            item_brand[i] = pool[rng.integers(len(pool))]
            kg.add_triplet(_t(item, brands[item_brand[i]], REL.PRODUCED_BY))
        if cats:
            pool = own(clusters.categories, c)
            kg.add_triplet(_t(item, cats[pool[rng.integers(len(pool))]], REL.BELONGS_TO))

    in_cluster = [np.flatnonzero(item_cluster == c) for c in range(k)]
    out_cluster = [np.flatnonzero(item_cluster != c) for c in range(k)]
    popularity = [1.0 / np.arange(1, p.size + 1) ** cfg.popularity_exponent for p in in_cluster]

    purchases = []
    for u, user in enumerate(users):
        c = clusters.users[u]
        favourite = -1
        if brands:
            pool = own(clusters.brands, c)
            favourite = pool[rng.integers(len(pool))]
        clusters.user_brands.append(favourite)
        weights = popularity[c] * np.where(item_brand[in_cluster[c]] == favourite,
                                           cfg.brand_preference, 1.0)
        taken: set[int] = set()
        for _ in range(cfg.purchases_per_user):
            i = _pick(rng, in_cluster[c], weights, taken) \
                if rng.random() < cfg.within_cluster_affinity else None
            if i is None:
                i = _pick(rng, out_cluster[c], None, taken)
            if i is None:  # out-of-cluster pool exhausted
                i = _pick(rng, in_cluster[c], weights, taken)
            taken.add(i)
            purchases.append((user, items[i], i))
            kg.add_triplet(_t(user, items[i], REL.PURCHASE))

    # a review draws words of the item's brand, with the same affinity as purchases
    word_brand = np.array(clusters.word_brands)
    words_of = {b: np.flatnonzero(word_brand == b) for b in set(item_brand.tolist())}
    if cfg.words_per_purchase:
        for user, item, i in purchases:
            own_words = words_of.get(int(item_brand[i]), np.empty(0, dtype=np.int64))
            for _ in range(cfg.words_per_purchase):
                pool = own_words if own_words.size and rng.random() < cfg.within_cluster_affinity \
                    else np.arange(cfg.num_words)
                w = words[int(pool[rng.integers(pool.size)])]
                kg.add_triplet(_t(user, w, REL.MENTION))
                kg.add_triplet(_t(item, w, REL.MENTION))
    return kg.freeze(), clusters


def _t(head, tail, rel):
    return Triplet(head, tail, rel)


def graph_to_tsv(kg: KnowledgeGraph) -> str:
    buf = io.StringIO()
    write_triplets(kg, buf)
    return buf.getvalue()
