"""Benchmark triple files, vocabularies and the filtered-ranking index."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from smartkge.errors import DataError

HEAD = "head"
TAIL = "tail"
SIDES = (HEAD, TAIL)


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocabulary:
    """Bidirectional label <-> id map; ids follow first appearance."""

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = []
        self._ids: dict[str, int] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        idx = self._ids.get(label)
        if idx is None:
            idx = len(self._labels)
            self._ids[label] = idx
            self._labels.append(label)
        return idx

    def id(self, label: str) -> int:
        return self._ids[label]

    def label(self, idx: int) -> str:
        return self._labels[idx]

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def __len__(self) -> int:
        return len(self._labels)

    def __iter__(self):
        return iter(self._labels)


@dataclass(frozen=True)
class KnowledgeGraph:
    """Integer-encoded knowledge graph with train/valid/test splits.

    ``filter_index[(e, r, side)]`` holds every entity that completes the
    query on ``side`` in any split, e.g. ``(h, r, TAIL)`` -> all known tails.
    """

    entities: Vocabulary
    relations: Vocabulary
    train: tuple[Triple, ...]
    valid: tuple[Triple, ...]
    test: tuple[Triple, ...]
    filter_index: dict[tuple[int, int, str], frozenset[int]] = field(repr=False)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def split(self, name: str) -> tuple[Triple, ...]:
        if name not in ("train", "valid", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    def as_array(self, name: str) -> np.ndarray:
        """Split as an ``(n, 3)`` int64 array of (head, relation, tail)."""
        triples = self.split(name)
        return np.asarray(triples, dtype=np.int64).reshape(len(triples), 3)

    def decode(self, triple: Triple) -> tuple[str, str, str]:
        return (
            self.entities.label(triple.head),
            self.relations.label(triple.relation),
            self.entities.label(triple.tail),
        )

    @classmethod
    def from_labels(
        cls,
        train: Sequence[tuple[str, str, str]],
        valid: Sequence[tuple[str, str, str]] = (),
        test: Sequence[tuple[str, str, str]] = (),
    ) -> "KnowledgeGraph":
        if not train:
            raise DataError("train split is empty")
        entities, relations = Vocabulary(), Vocabulary()
        encoded = []
        for rows in (train, valid, test):
            split = []
            for h, r, t in rows:
                split.append(Triple(entities.add(h), relations.add(r), entities.add(t)))
            encoded.append(tuple(split))
        _check_disjoint(*encoded)
        index = build_filter_index(encoded[0] + encoded[1] + encoded[2])
        return cls(entities, relations, encoded[0], encoded[1], encoded[2], index)


def build_filter_index(triples: Iterable[Triple]) -> dict[tuple[int, int, str], frozenset[int]]:
    index: dict[tuple[int, int, str], set[int]] = {}
    for h, r, t in triples:
        index.setdefault((h, r, TAIL), set()).add(t)
        index.setdefault((t, r, HEAD), set()).add(h)
    return {key: frozenset(values) for key, values in index.items()}


def _check_disjoint(*splits: tuple[Triple, ...]) -> None:
    names = ("train", "valid", "test")
    sets = [set(s) for s in splits]
    for i in range(3):
        for j in range(i + 1, 3):
            shared = sets[i] & sets[j]
            if shared:
                example = next(iter(shared))
                raise DataError(
                    f"{names[i]} and {names[j]} share {len(shared)} triple(s), e.g. {tuple(example)}"
                )


def read_triples(path: str | Path) -> list[tuple[str, str, str]]:
    """Parse a tab-separated triple file. Labels are kept verbatim."""
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            rows.append((fields[0], fields[1], fields[2]))
    return rows


def load_dataset(train_path, valid_path, test_path) -> KnowledgeGraph:
    """Load the three benchmark split files into a KnowledgeGraph."""
    train = read_triples(train_path)
    if not train:
        raise DataError(f"{train_path}: train split is empty")
    return KnowledgeGraph.from_labels(train, read_triples(valid_path), read_triples(test_path))


def filtered_candidates(kg: KnowledgeGraph, query_entity: int, relation: int, side: str) -> frozenset[int]:
    """Entities known to complete ``(query_entity, relation, ?)`` on ``side``.

    ``side`` names the missing slot: TAIL means ``query_entity`` is the head.
    """
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    return kg.filter_index.get((query_entity, relation, side), frozenset())
