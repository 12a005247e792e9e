"""Prompt-length accounting: walk contexts versus natural-language neighbourhood descriptions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import WalkConfig, node_context
from .graph import Graph
from .vocab import GRAPH, TEXT, TokenSeq, Vocab, build_vocab, encode_context

TEMPLATE_VERSION = "desc-v1"


def reduction_pct(gdl_tokens: float, description_tokens: float) -> float:
    return 100.0 * (1.0 - gdl_tokens / description_tokens)


def gdl_token_count(ctx, v: Vocab, with_attrs: bool = False, attrs=None, max_attr_tokens: int = 16) -> int:
    return len(encode_context(v, ctx, attrs if with_attrs else None, max_attr_tokens))


def structure_order(ctx) -> int:
    return max(len(s) for s in ctx) - 1


def describe_neighbourhood(g: Graph, v0: int, order: int, neighbor_cap: int = 10) -> list:
    """BFS description lines as token lists; node mentions are ints, words are strings."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    lines = []
    seen = {v0}
    frontier = [v0]
    for _ in range(order):
        nxt = []
        for u in frontier:
            listed = list(g.adjacency[u][:neighbor_cap])
            line = ["Node", u, "is", "connected", "to"]
            if listed:
                line.append("nodes")
                for i, w in enumerate(listed):
                    if i:
                        line.append(",")
                    line.append(w)
            else:
                line += ["no", "nodes"]
            line.append(".")
            lines.append(line)
            for w in listed:
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        frontier = nxt
        if not frontier:
            break
    return lines


def render_text(lines) -> str:
    out = []
    for line in lines:
        s = " ".join(str(t) for t in line)
        out.append(s.replace(" ,", ",").replace(" .", "."))
    return " ".join(out)


def description_render(g: Graph, v0: int, order: int, v: Vocab, neighbor_cap: int = 10) -> TokenSeq:
    """Tokenised description; every node mention is a single graph token."""
    ids, kinds = [], []
    for line in describe_neighbourhood(g, v0, order, neighbor_cap):
        for tok in line:
            if isinstance(tok, str):
                ids.append(v.word_id(tok.lower()))
                kinds.append(TEXT)
            else:
                ids.append(v.node_id(tok))
                kinds.append(GRAPH)
    return TokenSeq(np.array(ids, dtype=np.int64), np.array(kinds, dtype=np.int8))


@dataclass
class TokenReport:
    rows: list = field(default_factory=list)
    template: str = TEMPLATE_VERSION

    @property
    def mean_gdl(self) -> float:
        return float(np.mean([r["gdl_tokens"] for r in self.rows]))

    @property
    def mean_description(self) -> float:
        return float(np.mean([r["desc_tokens"] for r in self.rows]))

    @property
    def reduction(self) -> float:
        return reduction_pct(self.mean_gdl, self.mean_description)

    def table(self) -> str:
        lines = ["node\tgdl_tokens\tdesc_tokens\torder\treduction_pct"]
        for r in self.rows:
            lines.append(f"{r['node']}\t{r['gdl_tokens']}\t{r['desc_tokens']}\t{r['order']}\t{r['reduction_pct']:.2f}")
        lines.append(f"# mean_gdl={self.mean_gdl:.2f} mean_desc={self.mean_description:.2f} "
                     f"reduction_pct={self.reduction:.2f} template={self.template}")
        return "\n".join(lines) + "\n"

    def to_json(self, **extra) -> str:
        body = {
            "template": self.template,
            "mean_gdl_tokens": self.mean_gdl,
            "mean_desc_tokens": self.mean_description,
            "reduction_pct": self.reduction,
            "rows": self.rows,
        }
        return json.dumps({**body, **extra}, indent=2, sort_keys=True) + "\n"


def token_report(g: Graph, nodes, cfg: WalkConfig, order: int, v: Vocab | None = None,
                 with_attrs: bool = False, neighbor_cap: int = 10, max_attr_tokens: int = 16) -> TokenReport:
    """Per-node walk-context and description token counts.

    Contexts are drawn with the stream keyed by ``(cfg.seed, node)``.
    """
    v = v or build_vocab(g, with_text=with_attrs)
    report = TokenReport()
    for u in nodes:
        ctx = node_context(g, int(u), cfg, cfg.seed)
        gdl = gdl_token_count(ctx, v, with_attrs, g.attributes, max_attr_tokens)
        desc = len(description_render(g, int(u), order, v, neighbor_cap))
        report.rows.append({
            "node": int(u),
            "gdl_tokens": gdl,
            "desc_tokens": desc,
            "order": structure_order(ctx),
            "reduction_pct": reduction_pct(gdl, desc),
        })
    return report
