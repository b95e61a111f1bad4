"""Synthetic two-class graph datasets with controlled distortion.

Two connected Erdos-Renyi base graphs (one per class, Gaussian attributes
around opposite class centers) are corrupted at a configurable level: node and
edge deletions, spurious edges and nodes, attribute noise, and a random node
permutation. Randomness is counter-based: every sample draws from its own
stream keyed by (seed, split, class, sample index), so changing the sample
count never perturbs earlier samples.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .graphs import AttributedGraph, GraphDataset

CATEGORIES = ("0", "1")

_SPLIT_TRAIN, _SPLIT_TEST, _SPLIT_BASE = 0, 1, 2


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class DistortionSpec:
    level: float
    base_nodes: int = 10
    edge_density: float = 0.4
    node_dim: int = 2
    edge_dim: int = 1
    attr_noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.level <= 1.0):
            raise SynthError(f"level {self.level} outside [0, 1]")
        if self.base_nodes < 2:
            raise SynthError("base_nodes must be at least 2")
        if not (0.0 < self.edge_density <= 1.0):
            raise SynthError("edge_density must lie in (0, 1]")
        if self.attr_noise_sigma <= 0:
            raise SynthError("attr_noise_sigma must be positive")


def _rng(spec: DistortionSpec, *key) -> np.random.Generator:
    return np.random.default_rng([int(spec.seed) & 0xFFFFFFFFFFFFFFFF, *key])


def class_center(spec: DistortionSpec, category: str) -> np.ndarray:
    sign = 1.0 if category == CATEGORIES[0] else -1.0
    return sign * np.ones(spec.node_dim) / np.sqrt(spec.node_dim)


def generate_base(spec: DistortionSpec, category: str,
                  rng: np.random.Generator) -> AttributedGraph:
    """Connected Erdos-Renyi graph: random spanning tree plus density edges."""
    n = spec.base_nodes
    pairs = set()
    order = rng.permutation(n)
    for k in range(1, n):
        parent = order[rng.integers(0, k)]
        u, v = int(order[k]), int(parent)
        pairs.add((min(u, v), max(u, v)))
    for u in range(n):
        for v in range(u + 1, n):
            if (u, v) not in pairs and rng.random() < spec.edge_density:
                pairs.add((u, v))
    edges = sorted(pairs)
    center = class_center(spec, category)
    node_attrs = rng.normal(size=(n, spec.node_dim)) + center
    edge_attrs = rng.normal(size=(len(edges), spec.edge_dim))
    nodes = [(f"n{k}", node_attrs[k]) for k in range(n)]
    edge_items = [((f"n{u}", f"n{v}"), edge_attrs[e]) for e, (u, v) in enumerate(edges)]
    return AttributedGraph.from_items(nodes, edge_items, label=category,
                                      graph_id=f"base-{category}",
                                      node_dim=spec.node_dim, edge_dim=spec.edge_dim)


def _distort_once(base: AttributedGraph, spec: DistortionSpec,
                  rng: np.random.Generator):
    lvl = spec.level
    keep_node = rng.random(base.n_nodes) >= lvl
    kept = [k for k in range(base.n_nodes) if keep_node[k]]
    if not kept:
        return None
    pos = {old: new for new, old in enumerate(kept)}

    edges = []
    edge_attrs = []
    present = set()
    for e, (u, v) in enumerate(base.edges):
        if keep_node[u] and keep_node[v] and rng.random() >= lvl:
            edges.append((pos[u], pos[v]))
            edge_attrs.append(base.edge_attrs[e].copy())
            present.add((min(pos[u], pos[v]), max(pos[u], pos[v])))
    base_pairs = {(min(pos[u], pos[v]), max(pos[u], pos[v]))
                  for u, v in base.edges if keep_node[u] and keep_node[v]}
    n_kept = len(kept)
    for u in range(n_kept):
        for v in range(u + 1, n_kept):
            if (u, v) in base_pairs:
                continue
            if rng.random() < lvl * spec.edge_density:
                edges.append((u, v))
                edge_attrs.append(rng.normal(size=spec.edge_dim))
                present.add((u, v))

    node_attrs = base.node_attrs[kept].copy()
    noise_sd = lvl * spec.attr_noise_sigma
    if noise_sd > 0:
        node_attrs = node_attrs + rng.normal(scale=noise_sd, size=node_attrs.shape)
        if edge_attrs:
            stack = np.stack(edge_attrs)
            stack = stack + rng.normal(scale=noise_sd, size=stack.shape)
            edge_attrs = list(stack)

    if rng.random() < lvl:
        node_attrs = np.vstack([node_attrs, rng.normal(size=spec.node_dim)])
        n_kept += 1

    perm = rng.permutation(n_kept)
    ids = [f"n{int(perm[k])}" for k in range(n_kept)]
    nodes = [(ids[k], node_attrs[k]) for k in range(n_kept)]
    edge_items = [((ids[u], ids[v]), edge_attrs[e]) for e, (u, v) in enumerate(edges)]
    return nodes, edge_items


def distort(base: AttributedGraph, spec: DistortionSpec,
            rng: np.random.Generator, graph_id: str = "",
            label: str | None = None) -> AttributedGraph:
    """One corrupted copy of ``base``; retries up to 10 times if all nodes die."""
    for _ in range(10):
        result = _distort_once(base, spec, rng)
        if result is not None:
            nodes, edge_items = result
            return AttributedGraph.from_items(
                nodes, edge_items, label=label if label is not None else base.label,
                graph_id=graph_id or base.graph_id,
                node_dim=spec.node_dim, edge_dim=spec.edge_dim)
    raise SynthError(f"distortion at level {spec.level} deleted every node "
                     f"10 times in a row")


def make_bases(spec: DistortionSpec) -> dict:
    return {c: generate_base(spec, c, _rng(spec, _SPLIT_BASE, k))
            for k, c in enumerate(CATEGORIES)}


def make_dataset(spec: DistortionSpec, per_class: int):
    """(train, test) datasets with ``per_class`` distorted copies per class."""
    if per_class < 1:
        raise SynthError("per_class must be at least 1")
    bases = make_bases(spec)
    splits = []
    for split_id, split_name in ((_SPLIT_TRAIN, "train"), (_SPLIT_TEST, "test")):
        graphs = []
        for cls_id, c in enumerate(CATEGORIES):
            for i in range(per_class):
                rng = _rng(spec, split_id, cls_id, i)
                graphs.append(distort(bases[c], spec, rng,
                                      graph_id=f"{split_name}-{c}-{i:04d}", label=c))
        splits.append(GraphDataset(graphs, CATEGORIES, spec.node_dim, spec.edge_dim))
    return splits[0], splits[1]
