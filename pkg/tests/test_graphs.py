import json

import numpy as np
import pytest

from ragkit.graphs import (AttributedGraph, GraphDataset, GraphError,
                           canonical_order, graph_from_obj, graph_to_obj,
                           load_jsonl, save_jsonl, validate)


def make_graph(nodes, edges, **kw):
    return AttributedGraph.from_items(nodes, edges, **kw)


def test_minimal_graph_valid():
    g = make_graph([("a", [0.0])], [])
    validate(g, 1, 1)


def test_dangling_edge_rejected():
    with pytest.raises(GraphError, match="dangling"):
        make_graph([("a", [0.0])], [(("a", "b"), [1.0])])


def test_dimension_mismatch_rejected():
    g = make_graph([("a", [1.0, 2.0])], [])
    with pytest.raises(GraphError, match="attribute shape"):
        validate(g, 1, 1)


def test_self_loop_rejected():
    with pytest.raises(GraphError, match="self-loop"):
        make_graph([("a", [0.0])], [(("a", "a"), [1.0])])


def test_duplicate_edge_rejected():
    nodes = [("a", [0.0]), ("b", [1.0])]
    with pytest.raises(GraphError, match="duplicate edge"):
        make_graph(nodes, [(("a", "b"), [1.0]), (("b", "a"), [2.0])])


def test_duplicate_node_id_rejected():
    with pytest.raises(GraphError, match="duplicate node id"):
        make_graph([("a", [0.0]), ("a", [1.0])], [])


def test_non_finite_attribute_rejected():
    g = make_graph([("a", [np.nan])], [])
    with pytest.raises(GraphError, match="non-finite"):
        validate(g, 1, 1)


def test_canonical_order_sorts_nodes():
    g = make_graph([("b", [1.0]), ("a", [0.0])], [])
    c = canonical_order(g)
    assert c.node_ids == ("a", "b")
    assert c.node_attrs[0, 0] == 0.0


def test_canonical_order_idempotent():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(1, 8))
        ids = [f"x{int(v)}" for v in rng.permutation(100)[:n]]
        nodes = [(i, rng.normal(size=2)) for i in ids]
        edges = []
        for a in range(n):
            for b in range(a + 1, n):
                if rng.random() < 0.4:
                    edges.append(((ids[b], ids[a]), rng.normal(size=1)))
        g = make_graph(nodes, edges)
        once = canonical_order(g)
        assert canonical_order(once) == once


def test_edge_endpoint_normalization():
    nodes = [(str(k), [float(k)]) for k in range(4)]
    g = make_graph(nodes, [(("3", "1"), [0.5])])
    assert g.edges == ((1, 3),)


def test_serialization_roundtrip_bit_exact():
    nodes = [("n1", [0.1 + 0.2]), ("n0", [1.0 / 3.0])]
    g = make_graph(nodes, [(("n1", "n0"), [np.pi])], label="A", graph_id="g0")
    obj = json.loads(json.dumps(graph_to_obj(g)))
    back = graph_from_obj(obj)
    assert back == canonical_order(g)
    assert back.node_attrs.tobytes() == canonical_order(g).node_attrs.tobytes()


def test_dataset_jsonl_roundtrip(tmp_path):
    g0 = make_graph([("a", [0.5, 1.5])], [], label="0", graph_id="g0")
    g1 = make_graph([("a", [1.0, 2.0]), ("b", [3.0, 4.0])],
                    [(("a", "b"), [0.25])], label="1", graph_id="g1")
    ds = GraphDataset([g0, g1], ("0", "1"), 2, 1)
    path = tmp_path / "d.jsonl"
    save_jsonl(ds, path)
    back = load_jsonl(path)
    assert back.categories == ("0", "1")
    assert back.graphs == [canonical_order(g0), canonical_order(g1)]


def test_dataset_rejects_unknown_label(tmp_path):
    g = make_graph([("a", [0.0])], [], label="zzz")
    ds = GraphDataset([g], ("0", "1"), 1, 1)
    with pytest.raises(GraphError, match="label"):
        ds.validate()


def test_graph_arrays_immutable():
    g = make_graph([("a", [0.0])], [])
    with pytest.raises(ValueError):
        g.node_attrs[0, 0] = 1.0
