"""Filtered link-prediction ranking and MRR / Hits@N."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from smartkge.geometry import egt_distance
from smartkge.kgdata import HEAD, TAIL, KnowledgeGraph, Triple, filtered_candidates
from smartkge.model import AttentionState, EmbeddingState, transform_heads, weight_matrix

HITS_AT = (1, 3, 10)


@dataclass(frozen=True)
class RankResult:
    triple: Triple
    side: str
    rank: int


@dataclass(frozen=True)
class MetricsReport:
    mrr: float
    hits_at: dict[int, float] = field(default_factory=dict)
    n_queries: int = 0

    def row(self) -> dict[str, float]:
        return {
            "mrr_x1000": 1000.0 * self.mrr,
            **{f"h{n}": 100.0 * self.hits_at[n] for n in HITS_AT},
            "n_queries": self.n_queries,
        }

    def __str__(self) -> str:
        hits = "  ".join(f"H@{n}={100 * self.hits_at[n]:.1f}" for n in HITS_AT)
        return f"MRR={1000 * self.mrr:.1f}  {hits}  (n={self.n_queries})"


def candidate_scores(state: EmbeddingState, att: AttentionState, query_entity: int, relation: int, side: str, p: int = 2):
    """Scores of every entity placed in the missing slot of the query."""
    w = weight_matrix(att)[relation]
    if side == TAIL:
        x = transform_heads(state, relation, state.entity[query_entity])  # (4, d)
        dist = egt_distance(x[None, :, :], state.entity[:, None, :], p)  # (|E|, 4)
    else:
        x = transform_heads(state, relation, state.entity)  # (|E|, 4, d)
        dist = egt_distance(x, state.entity[query_entity][None, None, :], p)
    return -np.sum(w * dist, axis=-1)


def rank_from_scores(scores: np.ndarray, answer: int, excluded: Iterable[int] = ()) -> int:
    """Tie-averaged filtered rank of ``answer``; ties count half, rounded up."""
    keep = np.ones(scores.shape[0], dtype=bool)
    excluded = np.fromiter(excluded, dtype=np.int64)
    keep[excluded] = False
    keep[answer] = True
    target = scores[answer]
    kept = scores[keep]
    higher = int(np.count_nonzero(kept > target))
    equal = int(np.count_nonzero(kept == target)) - 1
    return 1 + higher + (equal + 1) // 2


def rank_query(
    state: EmbeddingState,
    att: AttentionState,
    kg: KnowledgeGraph,
    triple: Triple,
    side: str,
    p: int = 2,
    filtered: bool = True,
) -> RankResult:
    h, r, t = triple
    query_entity, answer = (h, t) if side == TAIL else (t, h)
    scores = candidate_scores(state, att, query_entity, r, side, p)
    excluded = filtered_candidates(kg, query_entity, r, side) if filtered else ()
    return RankResult(Triple(h, r, t), side, rank_from_scores(scores, answer, excluded))


def rank_all(
    state: EmbeddingState,
    att: AttentionState,
    kg: KnowledgeGraph,
    triples: Sequence[Triple],
    p: int = 2,
    filtered: bool = True,
) -> list[RankResult]:
    """Both query directions for each triple, tail side first."""
    results = []
    for triple in triples:
        for side in (TAIL, HEAD):
            results.append(rank_query(state, att, kg, triple, side, p, filtered))
    return results


def compute_metrics(ranks: Sequence[RankResult | int]) -> MetricsReport:
    values = np.array([r.rank if isinstance(r, RankResult) else r for r in ranks], dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot compute metrics over an empty rank list")
    mrr = float(np.mean(1.0 / values))
    hits = {n: float(np.mean(values <= n)) for n in HITS_AT}
    return MetricsReport(mrr, hits, int(values.size))


def evaluate(state, att, kg: KnowledgeGraph, split: str = "test", p: int = 2) -> MetricsReport:
    return compute_metrics(rank_all(state, att, kg, kg.split(split), p))


METRIC_COLUMNS = ("variant", "phase", "dim", "mrr_x1000", "h1", "h3", "h10", "n_queries")


def metrics_rows_tsv(rows: Iterable[tuple[str, str, int, MetricsReport]]) -> str:
    """TSV with one line per (variant, phase, dim, report); hits in percent."""
    lines = ["\t".join(METRIC_COLUMNS)]
    for variant, phase, dim, report in rows:
        vals = report.row()
        lines.append(
            "\t".join(
                [variant, phase, str(dim)]
                + [repr(float(vals[k])) for k in ("mrr_x1000", "h1", "h3", "h10")]
                + [str(report.n_queries)]
            )
        )
    return "\n".join(lines) + "\n"
