"""Explainable recommendation over a user-item knowledge graph."""
from .graph import (
    EntityId,
    EntityType,
    KnowledgeGraph,
    RelationType,
    Triplet,
    filter_relations,
    noise_distribution,
    read_triplets,
    split_train_test,
    write_triplets,
)
from .model import EmbeddingModel, Hyperparams, load_checkpoint, save_checkpoint, train

__all__ = [
    "EntityId", "EntityType", "KnowledgeGraph", "RelationType", "Triplet",
    "filter_relations", "noise_distribution", "read_triplets", "split_train_test",
    "write_triplets", "EmbeddingModel", "Hyperparams", "load_checkpoint",
    "save_checkpoint", "train",
]
__version__ = "0.1.0"
