"""Relation-specific geometric knowledge graph embeddings in complex space."""

from smartkge.errors import ConfigError, DataError, DivergenceError, SmartError
from smartkge.geometry import EGT, DEFAULT_ORDER
from smartkge.kgdata import KnowledgeGraph, Triple, load_dataset

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DivergenceError",
    "SmartError",
    "EGT",
    "DEFAULT_ORDER",
    "KnowledgeGraph",
    "Triple",
    "load_dataset",
]
