"""Independent checks of a pre-trained model against the exact walk kernel."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .graph import Graph
from .model import GraphLM, as_batch
from .vocab import Vocab, encode_sentence


@dataclass(frozen=True)
class TransitionOracle:
    matrix: np.ndarray
    isolated: np.ndarray

    def row(self, u: int) -> np.ndarray:
        if self.isolated[u]:
            raise ValueError(f"node {u} is isolated")
        return self.matrix[u]


def exact_transition_matrix(g: Graph) -> TransitionOracle:
    """Row-normalised dense adjacency built straight from the edge set."""
    n = g.node_count
    a = np.zeros((n, n))
    if g.edges:
        e = np.array(sorted(g.edges))
        a[e[:, 0], e[:, 1]] = 1.0
        a[e[:, 1], e[:, 0]] = 1.0
    rows = a.sum(axis=1)
    isolated = rows == 0
    p = np.divide(a, rows[:, None], out=np.zeros_like(a), where=~isolated[:, None])
    return TransitionOracle(p, isolated)


def graph_logits(m: GraphLM, contexts, v: Vocab) -> np.ndarray:
    """Last-position logits restricted to graph tokens, one row per context."""
    if any(len(c) == 0 for c in contexts):
        raise ValueError("context must contain at least one node")
    m.eval()
    seqs = [encode_sentence(v, c) for c in contexts]
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), 256):
            ids, kinds, lengths = as_batch(seqs[i:i + 256])
            _, logits = m(ids, kinds, "pretrain", lengths)
            last = logits[torch.arange(len(lengths)), lengths - 1]
            out.append(last[:, v.graph_offset:v.text_offset].double().numpy())
    return np.concatenate(out)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def model_next_distribution(m: GraphLM, context, v: Vocab) -> np.ndarray:
    """Next-node distribution over graph tokens only (other tokens masked out)."""
    if len(context) == 0:
        raise ValueError("context must contain at least one node")
    return softmax_rows(graph_logits(m, [tuple(context)], v))[0]


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    support = p > 0
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def kl_from_logits(oracle: TransitionOracle, logits: np.ndarray) -> dict:
    """Per-node KL(oracle row || softmax(logits row)) over non-isolated nodes."""
    z = logits - logits.max(axis=1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    per_node = {}
    for u in np.flatnonzero(~oracle.isolated):
        p = oracle.matrix[u]
        s = p > 0
        per_node[int(u)] = float(np.sum(p[s] * (np.log(p[s]) - logq[u, s])))
    vals = list(per_node.values())
    return {
        "per_node": per_node,
        "mean": float(np.mean(vals)) if vals else 0.0,
        "max": float(np.max(vals)) if vals else 0.0,
    }


def kl_vs_oracle(m: GraphLM, g: Graph, v: Vocab) -> dict:
    oracle = exact_transition_matrix(g)
    logits = graph_logits(m, [(u,) for u in range(g.node_count)], v)
    return kl_from_logits(oracle, logits)


def inner_products(m: GraphLM, g: Graph, v: Vocab) -> np.ndarray:
    """``X[u, q] = <W_h column of <node_q>, hidden state of context [u]>``."""
    m.eval()
    seqs = [encode_sentence(v, (u,)) for u in range(g.node_count)]
    ids, kinds, lengths = as_batch(seqs)
    with torch.no_grad():
        hidden, _ = m(ids, kinds, "pretrain", lengths)
        t = hidden[:, 0].double()
        w = m.head[:, v.graph_offset:v.text_offset].double()
    return (t @ w).numpy()


def permutation_pvalue(x: np.ndarray, y: np.ndarray, n_permutations: int, seed: int) -> float:
    """One-sided p-value for Spearman(x, y) > 0 under random relabelling of y."""
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    observed = np.corrcoef(rx, ry)[0, 1]
    rng = np.random.default_rng(seed)
    hits = sum(np.corrcoef(rx, rng.permutation(ry))[0, 1] >= observed for _ in range(n_permutations))
    return (hits + 1) / (n_permutations + 1)


def _correlations(x, pred, n_permutations, seed) -> dict:
    if np.ptp(pred) == 0:
        return {"degenerate": True, "note": "degenerate predictor, correlation undefined"}
    rho = stats.spearmanr(x, pred).statistic
    r = stats.pearsonr(x, pred).statistic
    out = {"degenerate": False, "spearman": float(rho), "pearson": float(r)}
    if n_permutations:
        out["permutation_p"] = permutation_pvalue(x, pred, n_permutations, seed)
    return out


@dataclass
class VerifyReport:
    kl_mean: float | None
    kl_max: float | None
    edge_count: int
    sum_a: float
    theorem_dq: dict
    theorem_dq_dprev: dict
    edge_mean_inner: float
    nonedge_mean_inner: float | None
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d.pop("rows")
        return d

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        lines = ["u\tq\tinner\tpred_dq\tpred_dqdq1\tis_edge"]
        for u, q, x, p1, p2, e in self.rows:
            p1s = "-inf" if p1 is None else f"{p1:.6f}"
            p2s = "-inf" if p2 is None else f"{p2:.6f}"
            lines.append(f"{u}\t{q}\t{x:.6f}\t{p1s}\t{p2s}\t{int(e)}")
        return "\n".join(lines) + "\n"


def theorem1_check(m: GraphLM, g: Graph, v: Vocab, n_permutations: int = 2000, seed: int = 0,
                   with_kl: bool = True) -> VerifyReport:
    """Correlate edge inner products with the degree-law predictors.

    For every directed edge ``(u, q)`` the predictor is ``log(sum_A / d_q)``
    and the alternative is ``log(sum_A / (d_q * d_u))``, with ``sum_A = 2|E|``.
    Non-edges carry an indicator of zero, i.e. a predictor of minus infinity.
    """
    x = inner_products(m, g, v)
    deg = g.degrees().astype(float)
    sum_a = 2.0 * g.edge_count
    rows, xs, p1, p2 = [], [], [], []
    nonedge = []
    n = g.node_count
    for u in range(n):
        nb = set(g.adjacency[u])
        for q in range(n):
            if q in nb:
                a = math.log(sum_a / deg[q])
                b = math.log(sum_a / (deg[q] * deg[u]))
                rows.append((u, q, float(x[u, q]), a, b, True))
                xs.append(x[u, q])
                p1.append(a)
                p2.append(b)
            elif q != u:
                rows.append((u, q, float(x[u, q]), None, None, False))
                nonedge.append(x[u, q])
    xs, p1, p2 = map(np.asarray, (xs, p1, p2))
    kl = kl_vs_oracle(m, g, v) if with_kl else {"mean": None, "max": None}
    return VerifyReport(
        kl_mean=kl["mean"],
        kl_max=kl["max"],
        edge_count=len(xs),
        sum_a=sum_a,
        theorem_dq=_correlations(xs, p1, n_permutations, seed) if len(xs) > 1 else {"degenerate": True},
        theorem_dq_dprev=_correlations(xs, p2, n_permutations, seed) if len(xs) > 1 else {"degenerate": True},
        edge_mean_inner=float(xs.mean()) if len(xs) else float("nan"),
        nonedge_mean_inner=float(np.mean(nonedge)) if nonedge else None,
        rows=rows,
    )
