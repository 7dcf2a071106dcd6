"""Shared fixtures: synthetic graphs, dataset writers and the acceptance summary."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from smartkge.kgdata import KnowledgeGraph


def synthetic_pattern_kg(seed: int = 0, n: int = 200) -> KnowledgeGraph:
    """One fully symmetric relation and one strict hierarchy over ``n`` entities.

    ``sym`` is a perfect matching stored in both directions; ``parent`` links
    every child ``c`` to ``(c - 1) // 3`` (a ternary tree). Split 80/10/10.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    pairs = sorted({(min(a, b), max(a, b)) for a, b in zip(perm[0::2], perm[1::2])})
    triples = []
    for a, b in pairs:
        triples += [(f"e{a}", "sym", f"e{b}"), (f"e{b}", "sym", f"e{a}")]
    triples += [(f"e{c}", "parent", f"e{(c - 1) // 3}") for c in range(1, n)]
    order = rng.permutation(len(triples))
    triples = [triples[i] for i in order]
    k = len(triples) // 10
    return KnowledgeGraph.from_labels(triples[2 * k :], triples[:k], triples[k : 2 * k])


def random_toy_kg(rng: np.random.Generator, n_entities: int, n_relations: int, n_triples: int) -> KnowledgeGraph:
    """Random distinct triples over a fixed vocabulary, split roughly 60/20/20."""
    seen = set()
    while len(seen) < n_triples:
        h, t = rng.integers(0, n_entities, 2)
        r = rng.integers(0, n_relations)
        seen.add((f"e{h}", f"r{r}", f"e{t}"))
    triples = sorted(seen)
    triples = [triples[i] for i in rng.permutation(len(triples))]
    a, b = int(0.6 * n_triples), int(0.8 * n_triples)
    return KnowledgeGraph.from_labels(triples[:a], triples[a:b], triples[b:])


def write_splits(kg: KnowledgeGraph, directory: Path) -> dict[str, Path]:
    paths = {}
    for name in ("train", "valid", "test"):
        path = Path(directory) / f"{name}.txt"
        path.write_text("".join("\t".join(kg.decode(t)) + "\n" for t in kg.split(name)), encoding="utf-8")
        paths[name] = path
    return paths


@pytest.fixture
def pattern_kg():
    return synthetic_pattern_kg(n=40)


@pytest.fixture
def toy_kg():
    return random_toy_kg(np.random.default_rng(3), 12, 3, 40)


# acceptance summary: one line per criterion, printed after the run

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _CRITERIA[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
