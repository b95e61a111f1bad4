"""Random attributed graph models.

A model is a prototype graph whose nodes carry Bernoulli occurrence
probabilities plus Gaussian attribute laws, and whose edges carry occurrence
probabilities conditional on endpoint co-presence plus Gaussian attribute
laws. Structural probabilities are maximum-likelihood occurrence fractions;
attribute means and covariances are estimated online with natural-gradient
steps (mean step preconditioned by the inverse covariance metric, covariance
step as a first-order convex-combination rule).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matcher
from .gaussian import log_density
from .graphs import AttributedGraph, canonical_order
from .matcher import AnnealSchedule, Morphism, likelihood_compatibility, validate_morphism


class ModelError(ValueError):
    """Model construction or update precondition violated."""


@dataclass
class NodeLaw:
    p_occur: float
    mean: np.ndarray
    cov: np.ndarray
    occur_count: int = 1
    update_count: int = 1


@dataclass
class EdgeLaw:
    p_occur: float  # conditional on both endpoints occurring
    mean: np.ndarray
    cov: np.ndarray
    occur_count: int = 1
    copresence_count: int = 1
    update_count: int = 1


@dataclass
class RandomGraphModel:
    node_laws: list
    edge_endpoints: tuple  # ((u, v), ...) with u < v
    edge_laws: list
    category: str
    node_dim: int
    edge_dim: int
    sample_count: int = 1
    epsilon_outlier: float = 1e-6
    p_min: float = 1e-6
    cov_floor: float = 1e-4

    @property
    def n_nodes(self) -> int:
        return len(self.node_laws)

    @property
    def n_edges(self) -> int:
        return len(self.edge_laws)


def _floor_spd(cov: np.ndarray, floor: float) -> np.ndarray:
    cov = (cov + cov.T) / 2.0
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    return (v * w) @ v.T


def _clamp(p: float, p_min: float) -> float:
    return min(max(p, p_min), 1.0 - p_min)


def default_eta_rule(t: int) -> float:
    """1/t learning rate: makes the mean update an exact running mean."""
    return 1.0 / t


def init_prototype(class_graphs, category: str, node_dim: int, edge_dim: int,
                   sigma0: float = 1.0, epsilon_outlier: float = 1e-6,
                   p_min: float = 1e-6, cov_floor: float = 1e-4) -> RandomGraphModel:
    """Prototype from the largest graph of the class (ties: first in order)."""
    if not class_graphs:
        raise ModelError(f"class {category!r}: empty class")
    largest = canonical_order(max(class_graphs, key=lambda g: g.n_nodes))
    node_laws = [NodeLaw(1.0, largest.node_attrs[k].copy(),
                         sigma0 * sigma0 * np.eye(node_dim))
                 for k in range(largest.n_nodes)]
    edge_laws = [EdgeLaw(1.0, largest.edge_attrs[e].copy(),
                         sigma0 * sigma0 * np.eye(edge_dim))
                 for e in range(largest.n_edges)]
    return RandomGraphModel(node_laws, largest.edges, edge_laws, category,
                            node_dim, edge_dim, sample_count=1,
                            epsilon_outlier=epsilon_outlier, p_min=p_min,
                            cov_floor=cov_floor)


def _update_law(law, x: np.ndarray, eta, floor: float) -> None:
    law.occur_count += 1
    law.update_count += 1
    rate = eta(law.update_count) if callable(eta) else float(eta)
    if not (0.0 < rate <= 1.0):
        raise ModelError(f"learning rate {rate} outside (0, 1]")
    diff_old = x - law.mean
    law.mean = law.mean + rate * diff_old
    law.cov = _floor_spd((1.0 - rate) * law.cov + rate * np.outer(diff_old, diff_old),
                         floor)


def observe(model: RandomGraphModel, graph: AttributedGraph,
            morphism: Morphism, eta) -> RandomGraphModel:
    """Online update of the model from one aligned outcome graph.

    ``eta`` is either a fixed rate in (0, 1] or a callable of the element's
    new update count. Mutates and returns ``model``.
    """
    try:
        validate_morphism(morphism, graph, model)
    except matcher.MatchError as exc:
        raise ModelError(f"bad morphism: {exc}") from exc
    model.sample_count += 1
    matched_nodes = set()
    for src, tgt in enumerate(morphism.node_map):
        if tgt is None:
            continue
        matched_nodes.add(tgt)
        _update_law(model.node_laws[tgt], graph.node_attrs[src], eta, model.cov_floor)
    matched_edges = set()
    for src, tgt in enumerate(morphism.edge_map):
        if tgt is None:
            continue
        matched_edges.add(tgt)
        _update_law(model.edge_laws[tgt], graph.edge_attrs[src], eta, model.cov_floor)
    for k, (u, v) in enumerate(model.edge_endpoints):
        if u in matched_nodes and v in matched_nodes:
            model.edge_laws[k].copresence_count += 1
    for law in model.node_laws:
        law.p_occur = law.occur_count / model.sample_count
    for law in model.edge_laws:
        law.p_occur = (law.occur_count / law.copresence_count
                       if law.copresence_count else 0.0)
    return model


def fit(class_graphs, category: str, node_dim: int, edge_dim: int,
        schedule: AnnealSchedule = AnnealSchedule(), eta_rule=None,
        sigma0: float = 1.0, epsilon_outlier: float = 1e-6,
        p_min: float = 1e-6, cov_floor: float = 1e-4) -> RandomGraphModel:
    """Single-pass estimation: init from the largest graph, then align and
    observe every remaining graph in order (exactly N-1 match calls)."""
    if not class_graphs:
        raise ModelError(f"class {category!r}: empty class")
    eta_rule = eta_rule or default_eta_rule
    proto_idx = max(range(len(class_graphs)), key=lambda k: class_graphs[k].n_nodes)
    model = init_prototype(class_graphs, category, node_dim, edge_dim,
                           sigma0=sigma0, epsilon_outlier=epsilon_outlier,
                           p_min=p_min, cov_floor=cov_floor)
    for k, graph in enumerate(class_graphs):
        if k == proto_idx:
            continue
        morphism, _, _ = matcher.match(graph, model, likelihood_compatibility(model),
                                       schedule)
        observe(model, graph, morphism, eta_rule)
    return model


def structural_outcome_log_prob(model: RandomGraphModel, nodes_present,
                                edges_present) -> float:
    """Log-probability of one structural outcome (which nodes/edges occur).

    Edges may be present only when both endpoints are; edges with an absent
    endpoint contribute probability 1. Probabilities are clamped before logs.
    """
    nodes_present = list(nodes_present)
    edges_present = list(edges_present)
    total = 0.0
    for k, law in enumerate(model.node_laws):
        p = _clamp(law.p_occur, model.p_min)
        total += np.log(p) if nodes_present[k] else np.log1p(-p)
    for k, (u, v) in enumerate(model.edge_endpoints):
        copresent = nodes_present[u] and nodes_present[v]
        if edges_present[k] and not copresent:
            raise ModelError(f"edge {k} present without both endpoints")
        if not copresent:
            continue
        p = _clamp(model.edge_laws[k].p_occur, model.p_min)
        total += np.log(p) if edges_present[k] else np.log1p(-p)
    return float(total)


def log_likelihood(model: RandomGraphModel, graph: AttributedGraph,
                   morphism: Morphism, structure_only: bool = False) -> float:
    """Log-probability that the model generated ``graph`` under ``morphism``.

    Outcome elements mapped to nothing are charged ln(epsilon_outlier) each;
    with ``structure_only`` the Gaussian attribute terms are skipped.
    """
    try:
        validate_morphism(morphism, graph, model)
    except matcher.MatchError as exc:
        raise ModelError(f"bad morphism: {exc}") from exc
    matched_nodes = {tgt: src for src, tgt in enumerate(morphism.node_map) if tgt is not None}
    matched_edges = {tgt: src for src, tgt in enumerate(morphism.edge_map) if tgt is not None}
    nodes_present = [k in matched_nodes for k in range(model.n_nodes)]
    edges_present = [k in matched_edges for k in range(model.n_edges)]
    total = structural_outcome_log_prob(model, nodes_present, edges_present)
    if not structure_only:
        for tgt, src in matched_nodes.items():
            law = model.node_laws[tgt]
            total += log_density(graph.node_attrs[src], law.mean, law.cov)
        for tgt, src in matched_edges.items():
            law = model.edge_laws[tgt]
            total += log_density(graph.edge_attrs[src], law.mean, law.cov)
    outlier = float(np.log(model.epsilon_outlier))
    total += outlier * sum(1 for m in morphism.node_map if m is None)
    total += outlier * sum(1 for m in morphism.edge_map if m is None)
    return float(total)


def best_log_likelihood(model: RandomGraphModel, graph: AttributedGraph,
                        schedule: AnnealSchedule = AnnealSchedule(),
                        compat=None) -> float:
    """Log-likelihood under the most probable morphism found by matching.

    ``compat`` may carry a prebuilt ``likelihood_compatibility(model)`` so
    callers embedding many graphs reuse the factored model parameters.
    """
    if graph.n_nodes == 0:
        return log_likelihood(model, graph, Morphism((), ()))
    if model.n_nodes == 0:
        morphism = Morphism((None,) * graph.n_nodes, (None,) * graph.n_edges)
        return log_likelihood(model, graph, morphism)
    morphism, _, _ = matcher.match(
        graph, model, compat or likelihood_compatibility(model), schedule)
    return log_likelihood(model, graph, morphism)


def dataset_cost(model: RandomGraphModel, graphs,
                 schedule: AnnealSchedule = AnnealSchedule()) -> float:
    """Diagnostic training cost: sum of best log-likelihoods over the slice."""
    return float(sum(best_log_likelihood(model, g, schedule) for g in graphs))


def model_to_obj(model: RandomGraphModel) -> dict:
    def law_obj(law, edge=False):
        obj = {
            "p_occur": float(law.p_occur),
            "mean": [float(x) for x in law.mean],
            "cov": [float(x) for x in np.asarray(law.cov).ravel()],
            "occur_count": law.occur_count,
            "update_count": law.update_count,
        }
        if edge:
            obj["copresence_count"] = law.copresence_count
        return obj

    return {
        "category": model.category,
        "node_dim": model.node_dim,
        "edge_dim": model.edge_dim,
        "sample_count": model.sample_count,
        "epsilon_outlier": model.epsilon_outlier,
        "p_min": model.p_min,
        "cov_floor": model.cov_floor,
        "nodes": [law_obj(law) for law in model.node_laws],
        "edges": [{"u": u, "v": v, **law_obj(model.edge_laws[k], edge=True)}
                  for k, (u, v) in enumerate(model.edge_endpoints)],
    }


def model_from_obj(obj: dict) -> RandomGraphModel:
    nd, ed = int(obj["node_dim"]), int(obj["edge_dim"])
    node_laws = [NodeLaw(o["p_occur"], np.array(o["mean"], float),
                         np.array(o["cov"], float).reshape(nd, nd),
                         o["occur_count"], o["update_count"])
                 for o in obj["nodes"]]
    edge_laws = []
    endpoints = []
    for o in obj["edges"]:
        endpoints.append((int(o["u"]), int(o["v"])))
        edge_laws.append(EdgeLaw(o["p_occur"], np.array(o["mean"], float),
                                 np.array(o["cov"], float).reshape(ed, ed),
                                 o["occur_count"], o["copresence_count"],
                                 o["update_count"]))
    return RandomGraphModel(node_laws, tuple(endpoints), edge_laws,
                            obj["category"], nd, ed,
                            sample_count=int(obj["sample_count"]),
                            epsilon_outlier=float(obj["epsilon_outlier"]),
                            p_min=float(obj["p_min"]),
                            cov_floor=float(obj["cov_floor"]))


def save_model(model: RandomGraphModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_obj(model), sort_keys=True, indent=1),
                          encoding="utf-8")


def load_model(path) -> RandomGraphModel:
    return model_from_obj(json.loads(Path(path).read_text(encoding="utf-8")))
