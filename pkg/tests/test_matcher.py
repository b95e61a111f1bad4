import itertools
import math

import numpy as np
import pytest

from ragkit.graphs import AttributedGraph
from ragkit.matcher import (AnnealSchedule, Compatibility, MatchError, Morphism,
                            attribute_compatibility, likelihood_compatibility,
                            match, sinkhorn_normalize, validate_morphism)
from ragkit.model import NodeLaw, RandomGraphModel


def random_graph(rng, n, density=0.5, sep=2.0):
    nodes = [(f"n{k}", sep * rng.normal(size=2)) for k in range(n)]
    edges = []
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < density:
                edges.append(((f"n{a}", f"n{b}"), rng.normal(size=1)))
    return AttributedGraph.from_items(nodes, edges, graph_id="r")


def permuted_copy(g, perm):
    """Copy of g whose node j carries g's node perm[j]; true morphism j -> perm[j]."""
    ids = [f"p{j}" for j in range(g.n_nodes)]
    inv = {perm[j]: j for j in range(g.n_nodes)}
    nodes = [(ids[j], g.node_attrs[perm[j]]) for j in range(g.n_nodes)]
    edges = [((ids[inv[u]], ids[inv[v]]), g.edge_attrs[e])
             for e, (u, v) in enumerate(g.edges)]
    return AttributedGraph.from_items(nodes, edges, graph_id="perm")


# -- sinkhorn --------------------------------------------------------------

def test_sinkhorn_rejects_nonpositive():
    with pytest.raises(MatchError, match="positive"):
        sinkhorn_normalize(np.array([[1.0, 0.0], [1.0, 1.0]]), 5)


def test_sinkhorn_small_with_slack():
    out = sinkhorn_normalize(np.full((2, 2), 3.0), 50)
    assert 0.0 < out[0, 0] < 1.0
    assert out[0].sum() == pytest.approx(1.0, abs=1e-9)


def test_sinkhorn_fixed_point():
    m = np.full((4, 4), 0.25)
    out = sinkhorn_normalize(m, 30)
    assert np.max(np.abs(out - m)) < 1e-12


def test_sinkhorn_uniform_closed_form():
    n = 5
    out = sinkhorn_normalize(np.full((n, n), 7.3), 40, slack=False)
    assert np.max(np.abs(out - 1.0 / n)) < 1e-12


def test_sinkhorn_convergence_property():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n_s, n_t = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        m = rng.uniform(0.1, 5.0, size=(n_s + 1, n_t + 1))
        out = sinkhorn_normalize(m, 300)
        assert np.allclose(out[:n_s].sum(axis=1), 1.0, atol=1e-6)
        assert np.allclose(out[:, :n_t].sum(axis=0), 1.0, atol=1e-6)


# -- matching --------------------------------------------------------------

def test_empty_source_rejected():
    g = AttributedGraph.from_items([], [], node_dim=1, edge_dim=1)
    h = AttributedGraph.from_items([("a", [0.0])], [])
    with pytest.raises(MatchError, match="empty"):
        match(g, h, attribute_compatibility())


def test_self_match_identity():
    rng = np.random.default_rng(0)
    for trial in range(5):
        g = random_graph(rng, 6)
        morphism, _, score = match(g, g, attribute_compatibility())
        assert morphism.node_map == tuple(range(6))
        assert score == pytest.approx(0.0, abs=1e-9)


def test_permutation_recovery():
    rng = np.random.default_rng(42)
    g = random_graph(rng, 6, sep=2.0)
    perm = list(rng.permutation(6))
    h = permuted_copy(g, perm)
    morphism, _, _ = match(h, g, attribute_compatibility())
    assert morphism.node_map == tuple(perm)


def test_brute_force_confirms_planted_permutation():
    rng = np.random.default_rng(5)
    g = random_graph(rng, 6, sep=2.0)
    perm = list(rng.permutation(6))
    h = permuted_copy(g, perm)
    compat = attribute_compatibility()(h, g)

    def total(assignment):
        s = float(sum(compat.node[a, assignment[a]] for a in range(6)))
        t_edges = {tuple(sorted(e)): k for k, e in enumerate(g.edges)}
        for e, (u, v) in enumerate(h.edges):
            mu, mv = assignment[u], assignment[v]
            te = t_edges.get((min(mu, mv), max(mu, mv)))
            s += compat.edge[e, te] if te is not None else compat.slack
        return s

    best = max(itertools.permutations(range(6)), key=total)
    assert list(best) == perm
    morphism, _, _ = match(h, g, compat)
    assert morphism.node_map == tuple(perm)


def test_impossible_target_node_left_unmatched():
    src = AttributedGraph.from_items([("a", [0.0]), ("b", [1.0])], [])
    tgt = AttributedGraph.from_items(
        [("x", [0.0]), ("y", [1.0]), ("z", [50.0])], [])
    node = attribute_compatibility()(src, tgt).node.copy()
    node[:, 2] = -np.inf
    morphism, _, _ = match(src, tgt, Compatibility(node, np.zeros((0, 0))))
    assert 2 not in morphism.node_map
    assert morphism.node_map == (0, 1)


def test_surplus_source_nodes_go_to_slack():
    src = AttributedGraph.from_items(
        [("a", [0.0]), ("b", [1.0]), ("c", [9.0])], [])
    tgt = AttributedGraph.from_items([("x", [0.0]), ("y", [1.0])], [])
    morphism, _, _ = match(src, tgt, attribute_compatibility())
    assert morphism.node_map == (0, 1, None)


def test_match_deterministic():
    rng = np.random.default_rng(9)
    g, h = random_graph(rng, 5), random_graph(rng, 7)
    r1 = match(g, h, attribute_compatibility())
    r2 = match(g, h, attribute_compatibility())
    assert r1[0] == r2[0]
    assert np.array_equal(r1[1], r2[1])
    assert r1[2] == r2[2]


def test_morphism_invariants_after_random_matches():
    rng = np.random.default_rng(7)
    for _ in range(15):
        g = random_graph(rng, int(rng.integers(2, 8)))
        h = random_graph(rng, int(rng.integers(1, 8)))
        morphism, soft, _ = match(g, h, attribute_compatibility())
        validate_morphism(morphism, g, h)  # raises on violation
        assert np.all(soft >= 0.0) and np.all(soft <= 1.0 + 1e-12)


def test_schedule_validation():
    with pytest.raises(MatchError):
        AnnealSchedule(beta_initial=5.0, beta_final=1.0)
    with pytest.raises(MatchError):
        AnnealSchedule(beta_rate=0.9)


# -- likelihood compatibility ---------------------------------------------

def one_node_model(p=1.0, mean=(0.0,), var=1.0):
    law = NodeLaw(p, np.array(mean, float), var * np.eye(len(mean)),
                  occur_count=1, update_count=1)
    return RandomGraphModel([law], (), [], "c", len(mean), 1)


def test_node_compat_at_mean():
    model = one_node_model()
    g = AttributedGraph.from_items([("a", [0.0])], [], edge_dim=1)
    compat = likelihood_compatibility(model)(g, model)
    assert compat.node[0, 0] == pytest.approx(math.log(1 / math.sqrt(2 * math.pi)),
                                              abs=1e-3)


def test_node_compat_adds_log_occurrence():
    m_half = one_node_model(p=0.5)
    g = AttributedGraph.from_items([("a", [0.0])], [], edge_dim=1)
    c_half = likelihood_compatibility(m_half)(g, m_half)
    assert c_half.node[0, 0] == pytest.approx(-0.9189 - 0.6931, abs=1e-3)


def test_compat_three_sigma_penalty():
    model = one_node_model()
    g = AttributedGraph.from_items([("a", [0.0]), ("b", [3.0])], [], edge_dim=1)
    compat = likelihood_compatibility(model)(g, model)
    assert compat.node[0, 0] - compat.node[1, 0] == pytest.approx(4.5, abs=1e-9)
