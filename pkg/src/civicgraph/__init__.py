"""Civic Issue Graph generation with adversarially adapted relation models."""
from .core import (
    BACKGROUND,
    SEEN,
    UNSEEN,
    BoundingBox,
    DomainPartition,
    ObjectVocabulary,
    PredicateVocabulary,
    ScoredRelation,
    partition_triples,
)

__version__ = "0.1.0"
