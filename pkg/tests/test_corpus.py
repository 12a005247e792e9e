import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphlang.corpus import (
    Corpus,
    WalkConfig,
    build_pretrain_corpus,
    format_sentence,
    node_context,
    parse_sentence,
    read_corpus,
    sample_walk,
    transition_prob,
    walk_rng,
)
from graphlang.errors import ConfigError, CorpusFormatError
from graphlang.graph import Graph, erdos_renyi, path_graph, star_graph


def test_transition_prob_triangle(triangle):
    assert transition_prob(triangle, 0, 1) == 0.5
    assert transition_prob(triangle, 0, 0) == 0.0


def test_transition_prob_star():
    g = star_graph(4)
    assert [transition_prob(g, 0, v) for v in range(1, 5)] == [0.25] * 4
    assert transition_prob(g, 3, 0) == 1.0


def test_transition_prob_isolated():
    g = Graph.from_edges([(0, 1)], node_count=3)
    with pytest.raises(ValueError, match="isolated"):
        transition_prob(g, 2, 0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 30), p=st.floats(0.05, 1.0), seed=st.integers(0, 10_000))
def test_rows_sum_to_one(n, p, seed):
    g = erdos_renyi(n, p, seed)
    for u in range(n):
        if g.adjacency[u]:
            assert sum(transition_prob(g, u, v) for v in range(n)) == pytest.approx(1.0, abs=1e-12)


def test_walk_on_path_is_edge_sequence():
    g = path_graph(5)
    w = sample_walk(g, 0, 6, walk_rng(0, 0))
    assert len(w) == 6 and w[0] == 0
    assert all(g.has_edge(a, b) for a, b in zip(w, w[1:]))


def test_isolated_start_gives_single_token():
    g = Graph.from_edges([(0, 1)], node_count=3)
    assert sample_walk(g, 2, 5, walk_rng(0, 2)) == (2,)


def test_walk_config_validation():
    with pytest.raises(ConfigError):
        WalkConfig(k=0)
    with pytest.raises(ConfigError):
        WalkConfig(l=0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 40), p=st.floats(0.0, 1.0), seed=st.integers(0, 10_000),
       k=st.integers(1, 4), l=st.integers(1, 6))
def test_corpus_shape_and_support(n, p, seed, k, l):
    g = erdos_renyi(n, p, seed)
    c = build_pretrain_corpus(g, WalkConfig(k, l, seed))
    assert len(c) == k * n
    for i, s in enumerate(c.sentences):
        assert s[0] == i // k
        assert 1 <= len(s) <= l
        assert all(g.has_edge(a, b) for a, b in zip(s, s[1:]))
        if g.adjacency[s[0]]:
            assert len(s) == l


def test_corpus_is_worker_independent():
    g = erdos_renyi(60, 0.1, 1)
    cfg = WalkConfig(3, 5, 7)
    assert build_pretrain_corpus(g, cfg, workers=1).sentences == build_pretrain_corpus(g, cfg, workers=3).sentences


def test_corpus_seed_changes_output():
    g = erdos_renyi(30, 0.2, 1)
    a = build_pretrain_corpus(g, WalkConfig(2, 5, 0)).sentences
    b = build_pretrain_corpus(g, WalkConfig(2, 5, 1)).sentences
    assert a != b


def test_node_context_keys():
    g = erdos_renyi(20, 0.3, 0)
    cfg = WalkConfig(4, 5, 0)
    assert node_context(g, 3, cfg, 9, 1) == node_context(g, 3, cfg, 9, 1)
    assert node_context(g, 3, cfg, 9, 1) != node_context(g, 3, cfg, 9, 2)
    assert all(s[0] == 3 for s in node_context(g, 3, cfg, 9))


def test_sentence_text_round_trip():
    s = (3, 1, 4, 1)
    assert format_sentence(s) == "<node_3> <node_1> <node_4> <node_1>"
    assert parse_sentence(format_sentence(s)) == s


def test_corpus_file_round_trip(tmp_path):
    from graphlang.corpus import write_corpus

    g = erdos_renyi(15, 0.3, 2)
    c = build_pretrain_corpus(g, WalkConfig(2, 4, 5))
    path = tmp_path / "corpus.txt"
    write_corpus(c, path)
    back = read_corpus(path)
    assert back.sentences == c.sentences and back.config == c.config
    assert path.read_text().startswith("#gdl-corpus k=2 l=4 seed=5\n")


def test_corpus_malformed_line(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("#gdl-corpus k=1 l=2 seed=0\n<node_0> <node_1>\n<node_0> node_1\n")
    with pytest.raises(CorpusFormatError, match="line 3"):
        read_corpus(path)
    path.write_text("<node_0>\n")
    with pytest.raises(CorpusFormatError, match="header"):
        read_corpus(path)


def test_kernel_frequencies_small():
    # Quick version of the Monte-Carlo kernel check; the acceptance suite runs 1e5 samples.
    g = star_graph(3)
    rng = walk_rng(0, 99)
    counts = np.zeros(4)
    for _ in range(4000):
        counts[sample_walk(g, 0, 2, rng)[1]] += 1
    assert np.abs(counts[1:] / 4000 - 1 / 3).max() < 0.03
    assert isinstance(Corpus([], WalkConfig()), Corpus)
