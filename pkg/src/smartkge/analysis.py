"""Multi-run EGT adherence and relational pattern statistics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from smartkge.errors import DataError
from smartkge.geometry import DEFAULT_ORDER, EGT, parse_order
from smartkge.kgdata import KnowledgeGraph
from smartkge.model import select_from_weights

ROW_SUM_TOL = 1e-9


@dataclass
class AdherenceTable:
    """Per-relation fraction of runs selecting each EGT (storage column order)."""

    rows: dict[int, np.ndarray]
    n_runs: int

    def __post_init__(self):
        for r, row in self.rows.items():
            row = np.asarray(row, dtype=np.float64)
            if row.shape != (4,):
                raise DataError(f"adherence row for relation {r} must have 4 entries")
            if np.any(row < 0) or np.any(row > 1) or abs(row.sum() - 1.0) > ROW_SUM_TOL:
                raise DataError(f"adherence row for relation {r} is not a distribution: {row.tolist()}")
            self.rows[r] = row

    def selection(self, r: int, order: Sequence[EGT] = DEFAULT_ORDER) -> EGT:
        return select_from_weights(self.rows[r], order)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AdherenceTable):
            return NotImplemented
        return (
            self.n_runs == other.n_runs
            and self.rows.keys() == other.rows.keys()
            and all(np.array_equal(self.rows[r], other.rows[r]) for r in self.rows)
        )


def compute_adherence(run_selections: Sequence[tuple[object, Mapping[int, EGT]]]) -> AdherenceTable:
    """``adh(r, tau)`` = fraction of runs whose selection for ``r`` is ``tau``."""
    if not run_selections:
        raise ValueError("need at least one run")
    relations = set(run_selections[0][1])
    counts = {r: np.zeros(4) for r in relations}
    for run_id, selections in run_selections:
        if set(selections) != relations:
            raise DataError(f"run {run_id} covers a different relation set")
        for r, kind in selections.items():
            counts[r][EGT(kind)] += 1
    n = len(run_selections)
    return AdherenceTable({r: counts[r] / n for r in sorted(relations)}, n)


def save_adherence(table: AdherenceTable, path, kg: KnowledgeGraph, order: Sequence[EGT] = DEFAULT_ORDER) -> None:
    """TSV: header naming the EGT columns, then ``label<TAB>four fractions`` in ``order``."""
    lines = ["relation\t" + "\t".join(k.tag for k in order) + f"\t# n_runs={table.n_runs}"]
    for r in sorted(table.rows):
        row = table.rows[r]
        lines.append(kg.relations.label(r) + "\t" + "\t".join(repr(float(row[k])) for k in order))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_adherence(path, kg: KnowledgeGraph) -> AdherenceTable:
    """Read a table written by :func:`save_adherence`, mapping labels through ``kg``."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise DataError(f"{path}: empty adherence file")
    header = text[0].split("\t")
    n_runs = 1
    if header and header[-1].startswith("# n_runs="):
        n_runs = int(header[-1].split("=", 1)[1])
        header = header[:-1]
    if len(header) != 5 or header[0] != "relation":
        raise DataError(f"{path}: bad header {text[0]!r}")
    try:
        order = parse_order(header[1:])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    rows = {}
    for lineno, line in enumerate(text[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
        label = fields[0]
        if label not in kg.relations:
            raise DataError(f"{path}:{lineno}: unknown relation {label!r}")
        row = np.zeros(4)
        for kind, value in zip(order, fields[1:]):
            row[kind] = float(value)
        rows[kg.relations.id(label)] = row
    try:
        return AdherenceTable(rows, n_runs)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


@dataclass
class PatternProfile:
    relation: int
    symmetry_score: float
    inversion_partners: dict[int, float] = field(default_factory=dict)
    composition_hits: list[tuple[int, int, int, int]] = field(default_factory=list)


def analyze_patterns(kg: KnowledgeGraph, min_support: int = 10) -> list[PatternProfile]:
    """Symmetry, inversion overlap and composition support per relation (train split).

    Pairs are de-duplicated. A composition hit ``(r1, r2, r3, n)`` counts the
    ``n`` distinct pairs ``(h, t)`` with a path ``h -r1-> m -r2-> t`` and
    ``(h, r3, t)`` in train; it is listed under ``r3``.
    """
    if not kg.train:
        raise DataError("train split is empty")
    pairs: dict[int, set[tuple[int, int]]] = defaultdict(set)
    for h, r, t in kg.train:
        pairs[r].add((h, t))

    pair_relations: dict[tuple[int, int], set[int]] = defaultdict(set)
    for r, ps in pairs.items():
        for pair in ps:
            pair_relations[pair].add(r)

    out_edges: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for r, ps in pairs.items():
        for h, t in ps:
            out_edges[h].append((r, t))

    profiles = {}
    for r in range(kg.n_relations):
        ps = pairs.get(r, set())
        n = len(ps)
        sym = sum((t, h) in ps for h, t in ps) / n if n else 0.0
        inverse: dict[int, int] = defaultdict(int)
        for h, t in ps:
            for other in pair_relations.get((t, h), ()):
                if other != r:
                    inverse[other] += 1
        profiles[r] = PatternProfile(r, sym, {o: c / n for o, c in sorted(inverse.items())})

    for r1, ps1 in pairs.items():
        reach: dict[int, set[tuple[int, int]]] = defaultdict(set)
        for h, m in ps1:
            for r2, t in out_edges.get(m, ()):
                reach[r2].add((h, t))
        for r2, ends in reach.items():
            if len(ends) < min_support:
                continue
            support: dict[int, int] = defaultdict(int)
            for pair in ends:
                for r3 in pair_relations.get(pair, ()):
                    support[r3] += 1
            for r3, count in support.items():
                if count >= min_support:
                    profiles[r3].composition_hits.append((r1, r2, r3, count))

    for profile in profiles.values():
        profile.composition_hits.sort()
    return [profiles[r] for r in range(kg.n_relations)]


SYMMETRY_FLAG = 0.9


def _flag(row: np.ndarray, order: Sequence[EGT], profile: PatternProfile | None) -> str:
    if profile is None or profile.symmetry_score <= SYMMETRY_FLAG:
        return ""
    chosen = select_from_weights(row, order)
    return "symmetric-but-" + chosen.tag if chosen in (EGT.TRANS, EGT.SCAL) else ""


def adherence_report(
    adh: AdherenceTable,
    profiles: Sequence[PatternProfile] = (),
    kg: KnowledgeGraph | None = None,
    order: Sequence[EGT] = DEFAULT_ORDER,
    fmt: str = "tsv",
) -> str:
    """Adherence percentages per relation, plus symmetry and a consistency flag.

    A row is flagged when a relation with symmetry above 0.9 adheres to
    translation or scaling, neither of which can model symmetry.
    """
    by_rel = {p.relation: p for p in profiles}
    columns = ["relation"] + [k.tag for k in order]
    if by_rel:
        columns += ["symmetry", "flag"]
    rows = []
    for r in sorted(adh.rows):
        label = kg.relations.label(r) if kg is not None else str(r)
        row = adh.rows[r]
        cells = [label] + [f"{100 * row[k]:.1f}" for k in order]
        if by_rel:
            profile = by_rel.get(r)
            cells.append(f"{profile.symmetry_score:.3f}" if profile else "")
            cells.append(_flag(row, order, profile))
        rows.append(cells)
    if fmt == "tsv":
        return "\n".join("\t".join(c) for c in [columns] + rows) + "\n"
    if fmt == "markdown":
        lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
        lines += ["| " + " | ".join(c) + " |" for c in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")
