import pytest

from graphlang.corpus import WalkConfig, node_context
from graphlang.graph import Graph, erdos_renyi, path_graph, star_graph
from graphlang.tokens import (
    describe_neighbourhood,
    description_render,
    gdl_token_count,
    reduction_pct,
    render_text,
    structure_order,
    token_report,
)
from graphlang.vocab import build_vocab


@pytest.mark.parametrize("gdl,desc,expected", [(54, 146, 63.01), (72, 130, 44.62), (72, 140, 48.57)])
def test_reduction_arithmetic(gdl, desc, expected):
    assert round(reduction_pct(gdl, desc), 2) == expected


def test_gdl_count_without_attrs():
    g = erdos_renyi(30, 0.3, 0)
    v = build_vocab(g)
    ctx = node_context(g, 0, WalkConfig(10, 5), 0)
    assert gdl_token_count(ctx, v) == 60
    assert structure_order(ctx) == 4


def test_gdl_count_with_attrs_grows():
    g = Graph.from_edges([(0, 1), (1, 2)], attributes={0: "a b", 1: "a c", 2: "b c"})
    v = build_vocab(g, with_text=True)
    ctx = [(0, 1, 2)]
    assert gdl_token_count(ctx, v) == 4
    assert gdl_token_count(ctx, v, with_attrs=True, attrs=g.attributes) == 4 + 6


def test_description_text():
    g = star_graph(2)
    lines = describe_neighbourhood(g, 1, 2)
    assert render_text(lines) == "Node 1 is connected to nodes 0. Node 0 is connected to nodes 1, 2."


def test_description_isolated_node():
    g = Graph.from_edges([(0, 1)], node_count=3)
    assert render_text(describe_neighbourhood(g, 2, 3)) == "Node 2 is connected to no nodes."


def test_description_needs_order():
    with pytest.raises(ValueError):
        describe_neighbourhood(path_graph(3), 0, 0)


def test_neighbour_cap():
    g = star_graph(15)
    seq = description_render(g, 0, 1, build_vocab(g), neighbor_cap=10)
    # "Node 0 is connected to nodes" + 10 ids + 9 commas + "."
    assert len(seq) == 6 + 10 + 9 + 1


def test_description_grows_with_order():
    g = erdos_renyi(50, 8 / 49, 0)
    v = build_vocab(g)
    sizes = [len(description_render(g, 0, k, v)) for k in (1, 2, 3, 4)]
    assert sizes == sorted(sizes) and sizes[0] < sizes[-1]


def test_report_and_table():
    g = erdos_renyi(20, 0.3, 1)
    r = token_report(g, range(5), WalkConfig(10, 5, 0), 2)
    assert len(r.rows) == 5
    lines = r.table().splitlines()
    assert lines[0] == "node\tgdl_tokens\tdesc_tokens\torder\treduction_pct"
    assert lines[-1].startswith("# mean_gdl=") and "template=desc-v1" in lines[-1]
    assert r.reduction == pytest.approx(reduction_pct(r.mean_gdl, r.mean_description))
    assert r.to_json() == token_report(g, range(5), WalkConfig(10, 5, 0), 2).to_json()
