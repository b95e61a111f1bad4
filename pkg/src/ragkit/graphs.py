"""Attributed graphs: representation, validation, canonical ordering, JSON-Lines I/O.

Nodes and edges carry fixed-dimension float64 attribute vectors. Node ids are
opaque strings in the file format and dense integer indices internally. All
graph objects are immutable after construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """A graph or dataset violates one of its structural invariants."""


def _attr_matrix(rows: Sequence, dim: int | None, kind: str, owner: str) -> np.ndarray:
    lengths = {len(r) for r in rows}
    if rows and len(lengths) != 1:
        raise GraphError(f"{owner}: non-uniform {kind} attribute dimensions {sorted(lengths)}")
    if rows:
        inferred = lengths.pop()
        if dim is not None and inferred != dim:
            raise GraphError(f"{owner}: {kind} attribute dimension {inferred}, expected {dim}")
        dim = inferred
    arr = np.asarray(rows, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, dim if dim is not None else 0)
    return arr


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """Undirected graph with per-node and per-edge attribute vectors.

    ``edges`` holds internal node indices with u < v; external string ids live
    in ``node_ids``. Attribute arrays are read-only float64.
    """

    node_ids: tuple
    node_attrs: np.ndarray  # (n_nodes, node_dim)
    edges: tuple            # ((u, v), ...) internal indices, u < v
    edge_attrs: np.ndarray  # (n_edges, edge_dim)
    label: str | None = None
    graph_id: str = ""

    def __post_init__(self):
        na = np.ascontiguousarray(np.asarray(self.node_attrs, dtype=np.float64))
        ea = np.ascontiguousarray(np.asarray(self.edge_attrs, dtype=np.float64))
        # Empty attribute matrices carry no dimension information.
        if na.shape[0] == 0:
            na = na.reshape(0, 0)
        if ea.shape[0] == 0:
            ea = ea.reshape(0, 0)
        na.setflags(write=False)
        ea.setflags(write=False)
        object.__setattr__(self, "node_attrs", na)
        object.__setattr__(self, "edge_attrs", ea)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "edges", tuple((int(u), int(v)) for u, v in self.edges))

    @classmethod
    def from_items(cls, nodes, edges, label=None, graph_id="",
                   node_dim=None, edge_dim=None) -> "AttributedGraph":
        """Build from [(node_id, attr), ...] and [((uid, vid), attr), ...]."""
        ids = [str(nid) for nid, _ in nodes]
        seen = set()
        for nid in ids:
            if nid in seen:
                raise GraphError(f"graph {graph_id!r}: duplicate node id {nid!r}")
            seen.add(nid)
        index = {nid: k for k, nid in enumerate(ids)}
        node_attrs = _attr_matrix([list(a) for _, a in nodes], node_dim, "node", f"graph {graph_id!r}")

        pairs = []
        pair_set = set()
        for (uid, vid), _ in edges:
            uid, vid = str(uid), str(vid)
            if uid not in index or vid not in index:
                raise GraphError(f"graph {graph_id!r}: dangling edge ({uid!r}, {vid!r})")
            if uid == vid:
                raise GraphError(f"graph {graph_id!r}: self-loop at node {uid!r}")
            u, v = index[uid], index[vid]
            key = (min(u, v), max(u, v))
            if key in pair_set:
                raise GraphError(f"graph {graph_id!r}: duplicate edge ({uid!r}, {vid!r})")
            pair_set.add(key)
            pairs.append(key)
        edge_attrs = _attr_matrix([list(a) for _, a in edges], edge_dim, "edge", f"graph {graph_id!r}")
        return cls(tuple(ids), node_attrs, tuple(pairs), edge_attrs, label=label, graph_id=graph_id)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def node_dim(self) -> int:
        return self.node_attrs.shape[1]

    @property
    def edge_dim(self) -> int:
        return self.edge_attrs.shape[1]

    @property
    def edge_endpoints(self) -> tuple:
        return self.edges

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttributedGraph):
            return NotImplemented
        return (self.node_ids == other.node_ids
                and self.edges == other.edges
                and self.label == other.label
                and self.graph_id == other.graph_id
                and np.array_equal(self.node_attrs, other.node_attrs)
                and np.array_equal(self.edge_attrs, other.edge_attrs))

    def __hash__(self):
        return hash((self.node_ids, self.edges, self.label, self.graph_id))


def validate(graph: AttributedGraph, node_dim: int, edge_dim: int) -> None:
    """Raise GraphError naming the first violated invariant; None if valid."""
    gid = graph.graph_id
    seen = set()
    for nid in graph.node_ids:
        if nid in seen:
            raise GraphError(f"graph {gid!r}: duplicate node id {nid!r}")
        seen.add(nid)
    n = graph.n_nodes
    if n and graph.node_attrs.shape != (n, node_dim):
        raise GraphError(
            f"graph {gid!r}: node attribute shape {graph.node_attrs.shape}, "
            f"expected ({n}, {node_dim})")
    if graph.n_edges and graph.edge_attrs.shape != (graph.n_edges, edge_dim):
        raise GraphError(
            f"graph {gid!r}: edge attribute shape {graph.edge_attrs.shape}, "
            f"expected ({graph.n_edges}, {edge_dim})")
    if not np.all(np.isfinite(graph.node_attrs)):
        bad = int(np.argwhere(~np.isfinite(graph.node_attrs))[0][0])
        raise GraphError(f"graph {gid!r}: non-finite attribute at node {graph.node_ids[bad]!r}")
    if not np.all(np.isfinite(graph.edge_attrs)):
        bad = int(np.argwhere(~np.isfinite(graph.edge_attrs))[0][0])
        raise GraphError(f"graph {gid!r}: non-finite attribute at edge index {bad}")
    pair_set = set()
    for u, v in graph.edges:
        if not (0 <= u < n and 0 <= v < n):
            raise GraphError(f"graph {gid!r}: dangling edge ({u}, {v})")
        if u == v:
            raise GraphError(f"graph {gid!r}: self-loop at node {graph.node_ids[u]!r}")
        key = (min(u, v), max(u, v))
        if key in pair_set:
            raise GraphError(
                f"graph {gid!r}: duplicate edge ({graph.node_ids[u]!r}, {graph.node_ids[v]!r})")
        pair_set.add(key)


def canonical_order(graph: AttributedGraph) -> AttributedGraph:
    """Sort nodes by id and edges by (min endpoint id, max endpoint id)."""
    order = sorted(range(graph.n_nodes), key=lambda k: graph.node_ids[k])
    new_pos = {old: new for new, old in enumerate(order)}
    node_ids = tuple(graph.node_ids[k] for k in order)
    node_attrs = graph.node_attrs[order] if graph.n_nodes else graph.node_attrs

    def edge_key(e):
        u, v = graph.edges[e]
        a, b = sorted((graph.node_ids[u], graph.node_ids[v]))
        return (a, b)

    edge_order = sorted(range(graph.n_edges), key=edge_key)
    edges = []
    for e in edge_order:
        u, v = graph.edges[e]
        nu, nv = new_pos[u], new_pos[v]
        edges.append((min(nu, nv), max(nu, nv)))
    edge_attrs = graph.edge_attrs[edge_order] if graph.n_edges else graph.edge_attrs
    return AttributedGraph(node_ids, node_attrs, tuple(edges), edge_attrs,
                           label=graph.label, graph_id=graph.graph_id)


def graph_to_obj(graph: AttributedGraph) -> dict:
    g = canonical_order(graph)
    return {
        "id": g.graph_id,
        "label": g.label,
        "nodes": [{"id": nid, "attr": list(map(float, g.node_attrs[k]))}
                  for k, nid in enumerate(g.node_ids)],
        "edges": [{"u": g.node_ids[u], "v": g.node_ids[v],
                   "attr": list(map(float, g.edge_attrs[e]))}
                  for e, (u, v) in enumerate(g.edges)],
    }


def graph_from_obj(obj: dict, node_dim: int | None = None,
                   edge_dim: int | None = None) -> AttributedGraph:
    nodes = [(n["id"], n["attr"]) for n in obj["nodes"]]
    edges = [((e["u"], e["v"]), e["attr"]) for e in obj["edges"]]
    return AttributedGraph.from_items(nodes, edges, label=obj.get("label"),
                                      graph_id=obj.get("id", ""),
                                      node_dim=node_dim, edge_dim=edge_dim)


@dataclass
class GraphDataset:
    """A list of labeled graphs with shared attribute dimensions."""

    graphs: list
    categories: tuple
    node_dim: int
    edge_dim: int

    def __post_init__(self):
        self.categories = tuple(self.categories)

    def validate(self) -> None:
        for g in self.graphs:
            validate(g, self.node_dim, self.edge_dim)
            if g.label is not None and g.label not in self.categories:
                raise GraphError(f"graph {g.graph_id!r}: label {g.label!r} "
                                 f"not in categories {self.categories}")

    def class_slice(self, category: str) -> list:
        return [g for g in self.graphs if g.label == category]

    def __len__(self):
        return len(self.graphs)


def save_jsonl(dataset: GraphDataset, path) -> None:
    path = Path(path)
    lines = [json.dumps({"node_dim": dataset.node_dim, "edge_dim": dataset.edge_dim,
                         "categories": list(dataset.categories)}, sort_keys=True)]
    lines.extend(json.dumps(graph_to_obj(g), sort_keys=True) for g in dataset.graphs)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_jsonl(path) -> GraphDataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        raw = [line for line in fh if line.strip()]
    if not raw:
        raise GraphError(f"{path}: empty dataset file")
    header = json.loads(raw[0])
    for key in ("node_dim", "edge_dim", "categories"):
        if key not in header:
            raise GraphError(f"{path}: dataset header missing {key!r}")
    node_dim, edge_dim = int(header["node_dim"]), int(header["edge_dim"])
    graphs = [graph_from_obj(json.loads(line), node_dim, edge_dim) for line in raw[1:]]
    ds = GraphDataset(graphs, tuple(header["categories"]), node_dim, edge_dim)
    ds.validate()
    return ds
