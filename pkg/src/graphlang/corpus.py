"""Random-walk graph sentences and the pre-training corpus.

A sentence is a tuple of node ids in which every consecutive pair is an
edge. Its length counts tokens, so ``walk_length`` tokens make
``walk_length - 1`` transitions.
"""

from __future__ import annotations

import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorpusFormatError
from .graph import Graph, _check_node

GraphSentence = tuple

_HEADER = re.compile(r"^#gdl-corpus k=(\d+) l=(\d+) seed=(-?\d+)$")
_TOKEN = re.compile(r"^<node_(\d+)>$")


@dataclass(frozen=True)
class WalkConfig:
    k: int = 10
    l: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.l < 1:
            raise ConfigError(f"walks need k >= 1 and l >= 1, got k={self.k} l={self.l}")


@dataclass
class Corpus:
    sentences: list
    config: WalkConfig

    def __len__(self):
        return len(self.sentences)


def walk_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream keyed by ``(seed, *keys)``; identical in any worker."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *map(int, keys)]))


def transition_prob(g: Graph, vi: int, vj: int) -> float:
    """Probability that ``vj`` follows ``vi`` under the unbiased walk kernel."""
    _check_node(g, vi)
    _check_node(g, vj)
    nb = g.adjacency[vi]
    if not nb:
        raise ValueError(f"node {vi} is isolated; its transition distribution is undefined")
    # A is binary, so the row sum over N(vi) is the degree.
    a_ij = 1.0 if g.has_edge(vi, vj) else 0.0
    return a_ij / float(len(nb))


def sample_walk(g: Graph, start: int, l: int, rng: np.random.Generator) -> GraphSentence:
    _check_node(g, start)
    walk = [int(start)]
    adjacency = g.adjacency
    for _ in range(l - 1):
        nb = adjacency[walk[-1]]
        if not nb:
            break
        walk.append(nb[int(rng.integers(len(nb)))])
    return tuple(walk)


def _walks_for_nodes(g: Graph, cfg: WalkConfig, nodes) -> list:
    return [sample_walk(g, v, cfg.l, walk_rng(cfg.seed, v, j)) for v in nodes for j in range(cfg.k)]


def build_pretrain_corpus(g: Graph, cfg: WalkConfig, workers: int = 1) -> Corpus:
    """``cfg.k`` walks from every node, node-major then walk-minor.

    Every walk has its own stream keyed by ``(seed, start, walk index)``, so
    the output does not depend on ``workers``.
    """
    nodes = list(range(g.node_count))
    if workers <= 1 or len(nodes) < 2 * workers:
        return Corpus(_walks_for_nodes(g, cfg, nodes), cfg)
    chunks = [nodes[i * len(nodes) // workers:(i + 1) * len(nodes) // workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_walks_for_nodes, [g] * workers, [cfg] * workers, chunks))
    return Corpus([s for part in parts for s in part], cfg)


def sample_node_context(g: Graph, v: int, cfg: WalkConfig, rng: np.random.Generator) -> list:
    """``cfg.k`` sentences, each restarting from ``v``."""
    return [sample_walk(g, v, cfg.l, rng) for _ in range(cfg.k)]


def node_context(g: Graph, v: int, cfg: WalkConfig, seed: int, *keys: int) -> list:
    return sample_node_context(g, v, cfg, walk_rng(seed, v, *keys))


def format_sentence(s: GraphSentence) -> str:
    return " ".join(f"<node_{v}>" for v in s)


def parse_sentence(line: str, lineno: int | None = None) -> GraphSentence:
    nodes = []
    for tok in line.split(" ") if line else []:
        m = _TOKEN.match(tok)
        if not m:
            where = f"line {lineno}: " if lineno is not None else ""
            raise CorpusFormatError(f"{where}malformed graph token {tok!r}")
        nodes.append(int(m.group(1)))
    return tuple(nodes)


def write_corpus(c: Corpus, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#gdl-corpus k={c.config.k} l={c.config.l} seed={c.config.seed}\n")
        for s in c.sentences:
            fh.write(format_sentence(s) + "\n")
    os.replace(tmp, path)


def read_corpus(path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusFormatError(f"{path}: empty corpus file")
    m = _HEADER.match(lines[0])
    if not m:
        raise CorpusFormatError(f"{path}: line 1: missing '#gdl-corpus' header")
    cfg = WalkConfig(k=int(m.group(1)), l=int(m.group(2)), seed=int(m.group(3)))
    sentences = [parse_sentence(line, lineno) for lineno, line in enumerate(lines[1:], start=2)]
    return Corpus(sentences, cfg)
