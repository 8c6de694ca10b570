"""Translation embeddings trained with negative sampling.

Every entity has a vector ``e`` and every relation a vector ``r``. A relation
moves its head to ``e_h + r``; the model scores a tail by ``e_t . (e_h + r)``
and is trained so observed tails score high against sampled noise tails.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import backend as _backend
from .errors import ConfigError, EmptyCandidates, FormatError, SchemaViolation, UnknownEntity
from .graph import EntityId, EntityType, KnowledgeGraph, RelationType, Triplet, noise_distribution
from .sampling import sample_negatives  # noqa: F401  (re-exported)
from .seeding import rng_for

log = logging.getLogger(__name__)

SIGMOID_CLAMP = 30.0
N_RELATIONS = len(RelationType)


def _sigmoid(x):
    x = np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-x))


def _log_sigmoid(x):
    x = np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return -np.log1p(np.exp(-x))


class EmbeddingModel:
    """Entity and relation vectors plus the vocabularies they index.

    Entity rows are stored in one flat table ordered by entity type, so
    ``entity_matrix(t)`` is a view into it.
    """

    def __init__(self, keys: dict[EntityType, list[str]], entity_vectors: np.ndarray,
                 relation_vectors: np.ndarray):
        self.keys = {t: list(keys.get(t, [])) for t in EntityType}
        sizes = [len(self.keys[t]) for t in EntityType]
        entity_vectors = np.ascontiguousarray(entity_vectors)
        relation_vectors = np.ascontiguousarray(relation_vectors)
        if entity_vectors.ndim != 2 or entity_vectors.shape[0] != sum(sizes):
            raise ValueError(f"entity table must have {sum(sizes)} rows, got {entity_vectors.shape}")
        if relation_vectors.shape != (N_RELATIONS, entity_vectors.shape[1]):
            raise ValueError(f"relation table must be {N_RELATIONS}x{entity_vectors.shape[1]}")
        self.E = entity_vectors
        self.R = relation_vectors
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self._index: dict[EntityType, dict[str, int]] | None = None

    @classmethod
    def for_graph(cls, kg: KnowledgeGraph, dim: int, dtype=np.float64) -> "EmbeddingModel":
        n = sum(kg.vocab_sizes())
        return cls({t: kg.vocab(t) for t in EntityType},
                   np.zeros((n, dim), dtype=dtype), np.zeros((N_RELATIONS, dim), dtype=dtype))

    @property
    def dim(self) -> int:
        return self.E.shape[1]

    def vocab_sizes(self) -> tuple[int, ...]:
        return tuple(len(self.keys[t]) for t in EntityType)

    def row(self, e: EntityId) -> int:
        if not 0 <= e.index < len(self.keys[e.type]):
            raise UnknownEntity(f"{e!r} is not in the model vocabulary")
        return int(self.offsets[e.type]) + e.index

    def vector(self, e: EntityId) -> np.ndarray:
        return self.E[self.row(e)]

    def relation_vector(self, r: RelationType) -> np.ndarray:
        return self.R[int(r)]

    def entity_matrix(self, entity_type: EntityType) -> np.ndarray:
        start = int(self.offsets[entity_type])
        return self.E[start:start + len(self.keys[entity_type])]

    def entity(self, entity_type: EntityType, key: str) -> EntityId:
        if self._index is None:
            self._index = {t: {k: i for i, k in enumerate(self.keys[t])} for t in EntityType}
        try:
            return EntityId(entity_type, self._index[entity_type][key])
        except KeyError:
            raise UnknownEntity(f"no {entity_type.wire} with key {key!r}") from None

    def key_of(self, e: EntityId) -> str:
        self.row(e)
        return self.keys[e.type][e.index]

    def matches_vocab(self, kg: KnowledgeGraph) -> bool:
        return all(self.keys[t] == kg.vocab(t) for t in EntityType)

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.keys, self.E.copy(), self.R.copy())

    def __eq__(self, other):
        if not isinstance(other, EmbeddingModel):
            return NotImplemented
        return (self.keys == other.keys and self.E.dtype == other.E.dtype
                and self.E.shape == other.E.shape
                and self.E.tobytes() == other.E.tobytes() and self.R.tobytes() == other.R.tobytes())

    __hash__ = None

    def __repr__(self):
        return f"<EmbeddingModel dim={self.dim} sizes={self.vocab_sizes()} dtype={self.E.dtype}>"


# -- scoring ------------------------------------------------------------

def check_chain(start: EntityType, rels: Sequence[RelationType]) -> EntityType:
    """Type reached by following ``rels`` from ``start``; raises on a broken chain."""
    current = start
    for r in rels:
        if current not in r.heads:
            raise SchemaViolation(f"{r.wire} cannot follow an entity of type {current.wire}")
        current = r.tail
    return current


def trans(model: EmbeddingModel, e: EntityId, rels: Sequence[RelationType] = ()) -> np.ndarray:
    check_chain(e.type, rels)
    out = model.vector(e).astype(np.float64)
    for r in rels:
        out = out + model.R[int(r)]
    return out


def softmax_scores(model: EmbeddingModel, query: np.ndarray, entity_type: EntityType) -> np.ndarray:
    """Softmax of ``e . query`` over the full vocabulary of ``entity_type``."""
    logits = model.entity_matrix(entity_type).astype(np.float64) @ query
    if logits.size == 0:
        raise EmptyCandidates(f"no {entity_type.wire} entities")
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def softmax_prob(model: EmbeddingModel, head: EntityId, rels: Sequence[RelationType],
                 tail: EntityId, candidates: Sequence[EntityId] | None = None) -> float:
    """Probability of ``tail`` given ``trans(head, rels)`` among ``candidates``.

    ``candidates`` defaults to the whole vocabulary of the terminal type.
    """
    terminal = check_chain(head.type, rels)
    if tail.type is not terminal:
        raise SchemaViolation(f"tail must be {terminal.wire}, got {tail.type.wire}")
    query = trans(model, head, rels)
    if candidates is None:
        return float(softmax_scores(model, query, terminal)[tail.index])
    if len(candidates) == 0:
        raise EmptyCandidates("candidate set is empty")
    if tail not in candidates:
        raise ValueError("tail must be one of the candidates")
    rows = [model.row(c) for c in candidates]
    logits = model.E[rows].astype(np.float64) @ query
    logits -= logits.max()
    w = np.exp(logits)
    return float(w[list(candidates).index(tail)] / w.sum())


def ns_loss(model: EmbeddingModel, t: Triplet, negatives: Sequence[EntityId]) -> float:
    """Negated negative-sampling log-likelihood of one triplet."""
    query = trans(model, t.head, [t.relation])
    loss = -_log_sigmoid(model.vector(t.tail) @ query)
    for n in negatives:
        loss -= _log_sigmoid(-(model.vector(n) @ query))
    return float(loss)


@dataclass
class SparseGradient:
    """Gradient rows keyed by entity and relation; untouched rows are absent."""

    entities: dict[EntityId, np.ndarray] = field(default_factory=dict)
    relations: dict[RelationType, np.ndarray] = field(default_factory=dict)

    def add_entity(self, e: EntityId, g: np.ndarray) -> None:
        if e in self.entities:
            self.entities[e] = self.entities[e] + g
        else:
            self.entities[e] = g.copy()

    def add_relation(self, r: RelationType, g: np.ndarray) -> None:
        if r in self.relations:
            self.relations[r] = self.relations[r] + g
        else:
            self.relations[r] = g.copy()

    def merge(self, other: "SparseGradient") -> None:
        for e, g in other.entities.items():
            self.add_entity(e, g)
        for r, g in other.relations.items():
            self.add_relation(r, g)

    def norm(self) -> float:
        sq = sum(float(g @ g) for g in self.entities.values())
        sq += sum(float(g @ g) for g in self.relations.values())
        return math.sqrt(sq)


def ns_gradients(model: EmbeddingModel, t: Triplet, negatives: Sequence[EntityId]) -> SparseGradient:
    query = trans(model, t.head, [t.relation])
    e_t = model.vector(t.tail).astype(np.float64)
    c_pos = float(_sigmoid(-(e_t @ query)))
    grad = SparseGradient()
    head_grad = -c_pos * e_t
    grad.add_entity(t.tail, -c_pos * query)
    for n in negatives:
        e_n = model.vector(n).astype(np.float64)
        c_neg = float(_sigmoid(e_n @ query))
        grad.add_entity(n, c_neg * query)
        head_grad = head_grad + c_neg * e_n
    grad.add_entity(t.head, head_grad)
    grad.add_relation(t.relation, head_grad)
    return grad


# -- training -----------------------------------------------------------

@dataclass
class Hyperparams:
    dim: int = 300
    epochs: int = 20
    batch_size: int = 64
    negatives: int = 5
    lr_initial: float = 0.5
    lr_final: float = 0.0
    clip_norm: float = 5.0
    seed: int = 0
    mode: str = "deterministic"
    threads: int = 1

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.negatives < 0:
            raise ConfigError("negatives must be >= 0")
        # equality allowed so a zero learning rate is a valid no-op run
        if not self.lr_initial >= self.lr_final >= 0:
            raise ConfigError("need lr_initial >= lr_final >= 0")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0")
        if self.mode not in ("deterministic", "fast"):
            raise ConfigError(f"mode must be 'deterministic' or 'fast', got {self.mode!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @property
    def dtype(self):
        return np.float64 if self.mode == "deterministic" else np.float32


@dataclass
class TrainReport:
    epoch_losses: list[float]
    triplets_processed: int
    wall_time: float
    backend: str


def init_model(kg: KnowledgeGraph, dim: int, seed: int, dtype=np.float64) -> EmbeddingModel:
    """Uniform init in ``[-0.5/dim, 0.5/dim]`` for entities and relations."""
    rng = rng_for(seed, "init")
    bound = 0.5 / dim
    n = sum(kg.vocab_sizes())
    E = rng.uniform(-bound, bound, size=(n, dim))
    R = rng.uniform(-bound, bound, size=(N_RELATIONS, dim))
    return EmbeddingModel({t: kg.vocab(t) for t in EntityType}, E.astype(dtype), R.astype(dtype))


def draw_epoch_negatives(kg: KnowledgeGraph, k: int, rng: np.random.Generator,
                         dists=None) -> np.ndarray:
    """``(n_triplets, k)`` flat-row negatives, sampled per relation in enum order."""
    _, rels, _ = kg.arrays()
    offsets = kg.offsets()
    negs = np.zeros((len(rels), k), dtype=np.int64)
    if k == 0:
        return negs
    for r in RelationType:
        idx = np.flatnonzero(rels == r)
        if idx.size == 0:
            continue
        dist = dists[r] if dists is not None else noise_distribution(kg, r)
        draws = dist.sample(idx.size * k, rng).reshape(idx.size, k)
        negs[idx] = draws + offsets[r.tail]
    return negs


def train(kg: KnowledgeGraph, hp: Hyperparams | None = None, backend: str | None = None,
          model: EmbeddingModel | None = None) -> tuple[EmbeddingModel, TrainReport]:
    """Fit embeddings to ``kg`` with mini-batch SGD.

    Each epoch reshuffles the triplets and redraws negatives. The summed batch
    gradient is rescaled to ``clip_norm`` when its global norm exceeds it, and
    the learning rate decays linearly per batch from ``lr_initial`` to
    ``lr_final`` over the whole run.
    """
    hp = hp or Hyperparams()
    hp.validate()
    if len(kg) == 0:
        raise ConfigError("cannot train on an empty graph")
    kernels = _backend.get(backend)
    if model is None:
        model = init_model(kg, hp.dim, hp.seed, hp.dtype)
    elif not model.matches_vocab(kg) or model.dim != hp.dim:
        raise ConfigError("warm-start model does not match graph vocabulary or dim")

    heads, rels, tails = kg.arrays()
    n = len(heads)
    n_batches = math.ceil(n / hp.batch_size)
    total = hp.epochs * n_batches
    dists = {r: noise_distribution(kg, r) for r in RelationType if kg.relation_count(r)}
    shuffle_rng = rng_for(hp.seed, "shuffle")
    neg_rng = rng_for(hp.seed, "negatives")
    threads = hp.threads if hp.mode == "fast" else 1

    losses = []
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for epoch in range(hp.epochs):
            order = shuffle_rng.permutation(n).astype(np.int64)
            negs = draw_epoch_negatives(kg, hp.negatives, neg_rng, dists)
            step0 = epoch * n_batches
            args = (model.E, model.R, heads, rels, tails, negs, order, hp.batch_size,
                    hp.lr_initial, hp.lr_final, step0, total, hp.clip_norm)
            if pool is None:
                loss = kernels.sgd_batches(*args, 0, n_batches)
            else:
                # lock-free: workers update disjoint batch ranges of the shared tables
                bounds = np.linspace(0, n_batches, threads + 1).astype(int)
                futures = [pool.submit(kernels.sgd_batches, *args, int(a), int(b))
                           for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
                loss = sum(f.result() for f in futures)
            mean = loss / n
            if not math.isfinite(mean):
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}")
            losses.append(mean)
            log.info("epoch %d/%d loss %.6f", epoch + 1, hp.epochs, mean)
    finally:
        if pool is not None:
            pool.shutdown()
    report = TrainReport(losses, n * hp.epochs, time.perf_counter() - t0, kernels.NAME)
    return model, report


# -- checkpoints --------------------------------------------------------

MAGIC = b"ECFKG1\n"


def save_checkpoint(model: EmbeddingModel, path) -> None:
    header = "dim={} types={} relations={}\n".format(
        model.dim, ",".join(str(n) for n in model.vocab_sizes()), N_RELATIONS)
    lines = []
    for t in EntityType:
        for i, key in enumerate(model.keys[t]):
            if "\t" in key or "\n" in key or "\r" in key:
                raise FormatError(f"{t.wire} key {key!r} contains a tab or newline")
            lines.append(f"{t.wire}\t{i}\t{key}\n")
    body = np.concatenate([model.E, model.R]).astype("<f8", copy=False)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8"))
        fh.write("".join(lines).encode("utf-8"))
        fh.write(np.ascontiguousarray(body).tobytes())


def load_checkpoint(path) -> EmbeddingModel:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_checkpoint(data)


def _next_line(data: bytes, pos: int) -> tuple[str, int]:
    end = data.find(b"\n", pos)
    if end < 0:
        raise FormatError("unexpected end of file inside text section", pos)
    try:
        return data[pos:end].decode("utf-8"), end + 1
    except UnicodeDecodeError:
        raise FormatError("invalid UTF-8", pos) from None


def parse_checkpoint(data: bytes) -> EmbeddingModel:
    if not data.startswith(MAGIC):
        raise FormatError("bad magic; not an ECFKG1 checkpoint", 0)
    pos = len(MAGIC)
    header, nxt = _next_line(data, pos)
    try:
        fields = dict(part.split("=", 1) for part in header.split())
        dim = int(fields["dim"])
        sizes = [int(x) for x in fields["types"].split(",")]
        n_rel = int(fields["relations"])
    except (KeyError, ValueError):
        raise FormatError(f"malformed header {header!r}", pos) from None
    if dim < 1 or len(sizes) != len(EntityType) or n_rel != N_RELATIONS or min(sizes) < 0:
        raise FormatError(f"inconsistent header {header!r}", pos)
    pos = nxt
    keys: dict[EntityType, list[str]] = {t: [] for t in EntityType}
    for t, size in zip(EntityType, sizes):
        for i in range(size):
            line, nxt = _next_line(data, pos)
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] != t.wire or parts[1] != str(i):
                raise FormatError(f"expected vocab row {t.wire}\\t{i}, got {line[:60]!r}", pos)
            keys[t].append(parts[2])
            pos = nxt
    rows = sum(sizes) + N_RELATIONS
    expected = rows * dim * 8
    if len(data) - pos != expected:
        raise FormatError(
            f"matrix section has {len(data) - pos} bytes, header implies {expected}", pos)
    body = np.frombuffer(data, dtype="<f8", offset=pos).reshape(rows, dim).astype(np.float64)
    if not np.all(np.isfinite(body)):
        raise FormatError("non-finite value in matrix section", pos)
    n = sum(sizes)
    return EmbeddingModel(keys, body[:n].copy(), body[n:].copy())
