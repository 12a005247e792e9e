"""Text-attributed graphs: loading, validation, degree queries and splits."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import networkx as nx
import numpy as np

from .errors import GraphFormatError, SplitError

_NODES_DIRECTIVE = re.compile(r"^#\s*nodes\s*=\s*(\d+)\s*$")


@dataclass(frozen=True)
class Graph:
    """Undirected, unweighted graph with optional node text and labels.

    ``adjacency[i]`` is the sorted tuple of neighbours of node ``i``. Edges are
    stored once per unordered pair as ``(min, max)``.
    """

    node_count: int
    edges: frozenset
    adjacency: tuple
    attributes: Mapping[int, str] = field(default_factory=dict)
    labels: Mapping[int, int] = field(default_factory=dict)
    class_count: int = 0

    @classmethod
    def from_edges(
        cls,
        edges,
        node_count: int | None = None,
        attributes: Mapping[int, str] | None = None,
        labels: Mapping[int, int] | None = None,
    ) -> "Graph":
        """Build a validated graph from an iterable of node pairs.

        Directed pairs are symmetrized and duplicates dropped. Raises
        :class:`GraphFormatError` on self-loops, negative ids, attribute or
        label references past ``node_count``, or non-dense class ids.
        """
        pairs = set()
        max_id = -1
        for a, b in edges:
            a, b = int(a), int(b)
            if a < 0 or b < 0:
                raise GraphFormatError(f"negative node id in edge ({a}, {b})")
            if a == b:
                raise GraphFormatError(f"self-loop on node {a}")
            pairs.add((min(a, b), max(a, b)))
            max_id = max(max_id, a, b)
        n = max_id + 1 if node_count is None else int(node_count)
        if n <= max_id:
            raise GraphFormatError(f"edge references node {max_id} but node_count={n}")
        attributes = dict(attributes or {})
        labels = {int(k): int(v) for k, v in (labels or {}).items()}
        for v in list(attributes) + list(labels):
            if not 0 <= v < n:
                raise GraphFormatError(f"unknown node {v} (node_count={n})")
        for v, text in attributes.items():
            if "\t" in text or "\n" in text:
                raise GraphFormatError(f"attribute of node {v} contains a tab or newline")
        class_count = 0
        if labels:
            classes = sorted(set(labels.values()))
            if classes != list(range(len(classes))):
                raise GraphFormatError(f"class ids are not dense in [0, C): {classes}")
            class_count = len(classes)
        neighbours: list[list[int]] = [[] for _ in range(n)]
        for a, b in pairs:
            neighbours[a].append(b)
            neighbours[b].append(a)
        adjacency = tuple(tuple(sorted(nb)) for nb in neighbours)
        return cls(
            node_count=n,
            edges=frozenset(pairs),
            adjacency=adjacency,
            attributes=attributes,
            labels=labels,
            class_count=class_count,
        )

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def neighbors(self, v: int) -> tuple:
        _check_node(self, v)
        return self.adjacency[v]

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edges

    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.adjacency], dtype=np.int64)

    def without_attributes(self) -> "Graph":
        return Graph.from_edges(self.edges, self.node_count, labels=self.labels)

    def summary(self) -> str:
        return f"nodes={self.node_count} edges={self.edge_count} classes={self.class_count}"


@dataclass(frozen=True)
class Split:
    train: tuple
    validation: tuple
    test: tuple


def _check_node(g: Graph, v: int) -> None:
    if not 0 <= int(v) < g.node_count:
        raise IndexError(f"node id {v} out of range [0, {g.node_count})")


def degree(g: Graph, v: int) -> int:
    _check_node(g, v)
    return len(g.adjacency[v])


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            yield lineno, raw.rstrip("\n").rstrip("\r")


def load_graph(edge_path, labels_path=None, attrs_path=None) -> Graph:
    """Load a graph from the edge / labels / attributes text formats.

    A comment line ``# nodes=<n>`` in the edge file fixes the node count so
    trailing isolated nodes survive a save/load round-trip.
    """
    if not os.path.exists(edge_path):
        raise FileNotFoundError(f"edge file not found: {edge_path}")
    edges = []
    node_count = None
    for lineno, line in _read_lines(edge_path):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            m = _NODES_DIRECTIVE.match(stripped)
            if m:
                node_count = int(m.group(1))
            continue
        parts = stripped.split()
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise GraphFormatError(f"{edge_path}:{lineno}: expected two non-negative integers, got {line!r}")
        a, b = int(parts[0]), int(parts[1])
        if a == b:
            raise GraphFormatError(f"{edge_path}:{lineno}: self-loop on node {a}")
        edges.append((a, b))

    labels = {}
    if labels_path is not None:
        for lineno, line in _read_lines(labels_path):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip().isdigit() or not parts[1].strip().isdigit():
                raise GraphFormatError(f"{labels_path}:{lineno}: expected node_id<TAB>class_id, got {line!r}")
            labels[int(parts[0])] = int(parts[1])

    attributes = {}
    if attrs_path is not None:
        for lineno, line in _read_lines(attrs_path):
            if not line.strip() or line.startswith("#"):
                continue
            node, sep, text = line.partition("\t")
            if not sep or not node.strip().isdigit():
                raise GraphFormatError(f"{attrs_path}:{lineno}: expected node_id<TAB>text, got {line!r}")
            if "\t" in text:
                raise GraphFormatError(f"{attrs_path}:{lineno}: tab inside attribute text")
            attributes[int(node)] = text

    if node_count is None:
        ids = [v for e in edges for v in e] + list(labels) + list(attributes)
        node_count = max(ids) + 1 if ids else 0
    return Graph.from_edges(edges, node_count, attributes=attributes, labels=labels)


def save_graph(g: Graph, edge_path, labels_path=None, attrs_path=None) -> None:
    with open(edge_path, "w", encoding="utf-8") as fh:
        fh.write(f"# nodes={g.node_count}\n")
        for a, b in sorted(g.edges):
            fh.write(f"{a} {b}\n")
    if labels_path is not None:
        with open(labels_path, "w", encoding="utf-8") as fh:
            for v in sorted(g.labels):
                fh.write(f"{v}\t{g.labels[v]}\n")
    if attrs_path is not None:
        with open(attrs_path, "w", encoding="utf-8") as fh:
            for v in sorted(g.attributes):
                fh.write(f"{v}\t{g.attributes[v]}\n")


def _round_to_margins(ideal: np.ndarray, row_sums: np.ndarray, col_sums: np.ndarray) -> np.ndarray:
    # Each cell becomes floor or ceil of ideal while hitting both margins exactly.
    # Integer margins on a matrix guarantee such a rounding; find it by max-flow.
    base = np.floor(ideal).astype(np.int64)
    frac = ideal - base
    need_r = row_sums - base.sum(axis=1)
    need_c = col_sums - base.sum(axis=0)
    flow = nx.DiGraph()
    for i, r in enumerate(need_r):
        flow.add_edge("s", ("r", i), capacity=int(r))
    for j, c in enumerate(need_c):
        flow.add_edge(("c", j), "t", capacity=int(c))
    for i in range(ideal.shape[0]):
        for j in range(ideal.shape[1]):
            if frac[i, j] > 1e-12:
                flow.add_edge(("r", i), ("c", j), capacity=1)
    value, assignment = nx.maximum_flow(flow, "s", "t")
    if value != int(need_r.sum()):
        raise SplitError("could not round split sizes to integer margins")
    out = base.copy()
    for i in range(ideal.shape[0]):
        for j in range(ideal.shape[1]):
            out[i, j] += assignment[("r", i)].get(("c", j), 0)
    return out


def make_split(g: Graph, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> Split:
    """Stratified train/validation/test split of the labeled nodes.

    Part sizes are the largest-remainder rounding of ``fractions`` times the
    number of labeled nodes; per-class counts are within one node of the
    global proportions in every part.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise SplitError(f"fractions must be three positive numbers summing to <= 1, got {fractions}")
    if not g.labels:
        raise SplitError("graph has no labels")
    nodes = np.array(sorted(g.labels), dtype=np.int64)
    y = np.array([g.labels[v] for v in nodes], dtype=np.int64)
    n = len(nodes)
    class_sizes = np.bincount(y, minlength=g.class_count)
    small = [c for c, size in enumerate(class_sizes) if size < 3]
    if small:
        raise SplitError(f"classes {small} have fewer labeled nodes than split parts")

    raw = np.array(fractions + (max(0.0, 1.0 - sum(fractions)),)) * n
    sizes = np.floor(raw).astype(np.int64)
    remainder = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:remainder]] += 1
    if (sizes[:3] == 0).any():
        raise SplitError(f"split part would be empty with sizes {sizes[:3].tolist()}")

    ideal = np.outer(class_sizes, sizes) / n
    counts = _round_to_margins(ideal, class_sizes, sizes)

    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c in range(g.class_count):
        members = nodes[y == c]
        members = members[rng.permutation(len(members))]
        start = 0
        for p in range(3):
            parts[p].extend(int(v) for v in members[start:start + counts[c, p]])
            start += counts[c, p]
    return Split(*(tuple(sorted(p)) for p in parts))


# Synthetic graph constructors used by tests, acceptance runs and the CLI.

def path_graph(n: int) -> Graph:
    return Graph.from_edges([(i, i + 1) for i in range(n - 1)], n)


def star_graph(leaves: int) -> Graph:
    return Graph.from_edges([(0, i) for i in range(1, leaves + 1)], leaves + 1)


def cycle_graph(n: int) -> Graph:
    return Graph.from_edges([(i, (i + 1) % n) for i in range(n)], n)


def karate_club() -> Graph:
    return Graph.from_edges(nx.karate_club_graph().edges(), 34)


def star_with_clique(leaves: int, clique: int) -> Graph:
    """Star centred on node 0 whose last leaf is joined to every node of a clique."""
    edges = [(0, i) for i in range(1, leaves + 1)]
    first = leaves + 1
    members = list(range(first, first + clique))
    edges += [(a, b) for i, a in enumerate(members) for b in members[i + 1:]]
    edges.append((leaves, first))
    return Graph.from_edges(edges, first + clique)


def erdos_renyi(n: int, p: float, seed: int) -> Graph:
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < p, k=1)
    return Graph.from_edges(zip(*np.nonzero(upper)), n)


def stochastic_block_model(sizes: Sequence[int], p_in: float, p_out: float, seed: int) -> Graph:
    """SBM whose labels are the block memberships."""
    rng = np.random.default_rng(seed)
    block = np.repeat(np.arange(len(sizes)), sizes)
    n = len(block)
    prob = np.where(block[:, None] == block[None, :], p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    labels = {i: int(b) for i, b in enumerate(block)}
    return Graph.from_edges(zip(*np.nonzero(upper)), n, labels=labels)


def keyword_graph(n: int, classes: int, mean_degree: float, seed: int, fillers: int = 3) -> Graph:
    """Random graph whose labels are carried only by a keyword in each node's text."""
    rng = np.random.default_rng(seed)
    keywords = ["amber", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "heron"][:classes]
    pool = [f"word{i}" for i in range(40)]
    g = erdos_renyi(n, mean_degree / max(n - 1, 1), seed)
    labels = {v: int(rng.integers(classes)) for v in range(n)}
    # every class must appear; reassign the first few nodes deterministically.
    for c in range(classes):
        labels[c] = c
    attributes = {}
    for v in range(n):
        words = list(rng.choice(pool, size=fillers, replace=False))
        words.insert(int(rng.integers(fillers + 1)), keywords[labels[v]])
        attributes[v] = " ".join(words)
    return Graph.from_edges(g.edges, n, attributes=attributes, labels=labels)
