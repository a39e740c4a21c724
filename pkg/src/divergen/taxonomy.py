"""Taxonomy graph, path similarity and extra-category selection.

The taxonomy ships as a plain edge list (``child<TAB>parent`` per line) so no
external lexical database is required. A virtual root links every tree so any
two nodes have a finite path.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

VIRTUAL_ROOT = "*root*"


class TaxonomyError(ValueError):
    """Raised on malformed taxonomy files or unknown synsets."""


@dataclass(frozen=True)
class CategoryMatch:
    source_category: str
    best_target: str
    similarity: float


@dataclass(frozen=True)
class LabelSpacePartition:
    base_ids: tuple[int, ...]
    extra_ids: tuple[int, ...]

    @property
    def total(self) -> int:
        return len(self.base_ids) + len(self.extra_ids)

    def truncation_indices(self) -> tuple[int, ...]:
        """Unified-space indices a trainer must drop to stay in the base range."""
        return tuple(range(len(self.base_ids), self.total))

    def index_of(self, category_id: int) -> int:
        try:
            return self.base_ids.index(category_id)
        except ValueError:
            return len(self.base_ids) + self.extra_ids.index(category_id)


class TaxonomyGraph:
    """Undirected hypernym graph with a synthetic root over all top nodes."""

    def __init__(self, edges: Iterable[tuple[str, str]]):
        adjacency: dict[str, set[str]] = {}
        children: set[str] = set()
        for child, parent in edges:
            if child == parent:
                raise TaxonomyError(f"self-loop on {child!r}")
            adjacency.setdefault(child, set()).add(parent)
            adjacency.setdefault(parent, set()).add(child)
            children.add(child)
        roots = [node for node in adjacency if node not in children]
        if not adjacency:
            roots = []
        adjacency[VIRTUAL_ROOT] = set(roots)
        for root in roots:
            adjacency[root].add(VIRTUAL_ROOT)
        self._adjacency = {node: frozenset(nbrs) for node, nbrs in adjacency.items()}

    @classmethod
    def from_edge_file(cls, path: str | Path) -> "TaxonomyGraph":
        edges = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TaxonomyError(f"{path}:{lineno}: expected 'child<TAB>parent', got {line!r}")
            edges.append((parts[0], parts[1]))
        return cls(edges)

    def __contains__(self, node: str) -> bool:
        return node in self._adjacency

    @property
    def nodes(self) -> set[str]:
        return set(self._adjacency)

    def neighbors(self, node: str) -> frozenset[str]:
        try:
            return self._adjacency[node]
        except KeyError:
            raise TaxonomyError(f"unknown synset {node!r}") from None

    def shortest_path_length(self, a: str, b: str) -> int:
        if a not in self._adjacency:
            raise TaxonomyError(f"unknown synset {a!r}")
        if b not in self._adjacency:
            raise TaxonomyError(f"unknown synset {b!r}")
        if a == b:
            return 0
        dist = {a: 0}
        queue = deque([a])
        while queue:
            node = queue.popleft()
            for nbr in self._adjacency[node]:
                if nbr in dist:
                    continue
                dist[nbr] = dist[node] + 1
                if nbr == b:
                    return dist[nbr]
                queue.append(nbr)
        raise TaxonomyError(f"no path between {a!r} and {b!r}")  # unreachable with virtual root


def path_similarity(graph: TaxonomyGraph, a: str, b: str) -> float:
    """1 / (shortest path length + 1); 1.0 iff the synsets coincide."""
    return 1.0 / (graph.shortest_path_length(a, b) + 1)


def _as_name_to_synsets(entries) -> dict[str, tuple[str, ...]]:
    if isinstance(entries, Mapping):
        return {str(name): tuple(synsets) for name, synsets in entries.items()}
    return {str(node): (str(node),) for node in entries}


def max_similarity(
    graph: TaxonomyGraph, synsets_a: Sequence[str], synsets_b: Sequence[str]
) -> float:
    """Max path similarity over all sense pairs of two categories."""
    best = 0.0
    for a in synsets_a:
        for b in synsets_b:
            sim = path_similarity(graph, a, b)
            if sim > best:
                best = sim
    return best


def select_extra_categories(
    candidates, references, graph: TaxonomyGraph, threshold: float
) -> list[CategoryMatch]:
    """Candidates whose best reference similarity falls strictly below the threshold.

    ``candidates`` / ``references`` are either plain synset lists or mappings
    of category name to synset list (a category with several senses scores as
    the max over all sense pairs).
    """
    if not 0.0 < threshold < 1.0:
        raise TaxonomyError(f"threshold must be in (0, 1), got {threshold}")
    cand = _as_name_to_synsets(candidates)
    refs = _as_name_to_synsets(references)
    if not refs:
        raise TaxonomyError("reference category set is empty")
    selected: list[CategoryMatch] = []
    for name, synsets in cand.items():
        best_target = ""
        best_sim = -1.0
        for ref_name, ref_synsets in sorted(refs.items()):
            sim = max_similarity(graph, synsets, ref_synsets)
            if sim > best_sim:
                best_sim = sim
                best_target = ref_name
        if best_sim < threshold:
            selected.append(CategoryMatch(source_category=name, best_target=best_target,
                                          similarity=best_sim))
    return selected


def load_synset_mapping(path: str | Path) -> dict[str, tuple[str, ...]]:
    """JSON mapping of category name to its synset id list."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise TaxonomyError(f"{path}: expected a JSON object of name -> synset list")
    out: dict[str, tuple[str, ...]] = {}
    for name, synsets in doc.items():
        if isinstance(synsets, str):
            synsets = [synsets]
        out[str(name)] = tuple(str(s) for s in synsets)
    return out


def build_label_partition(base, extra) -> LabelSpacePartition:
    """Unified index space: base categories first, extras after, both by id."""
    base_ids = tuple(sorted(c.id for c in base))
    extra_ids = tuple(sorted(c.id for c in extra))
    collision = set(base_ids) & set(extra_ids)
    if collision:
        raise TaxonomyError(f"base/extra id collision: {sorted(collision)}")
    if len(set(base_ids)) != len(base_ids) or len(set(extra_ids)) != len(extra_ids):
        raise TaxonomyError("duplicate category ids within a partition side")
    return LabelSpacePartition(base_ids=base_ids, extra_ids=extra_ids)
