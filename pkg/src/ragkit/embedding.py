"""Log-likelihood feature-space embedding of graphs against class prototypes."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphs import GraphDataset
from .matcher import AnnealSchedule, likelihood_compatibility
from .model import best_log_likelihood


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class LikelihoodEmbedding:
    graph_id: str
    label: str | None
    features: np.ndarray  # one log-likelihood per prototype, fixed order

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        f.setflags(write=False)
        object.__setattr__(self, "features", f)


def _check_dims(models, node_dim: int, edge_dim: int) -> None:
    for m in models:
        if (m.node_dim, m.edge_dim) != (node_dim, edge_dim):
            raise EmbeddingError(
                f"model {m.category!r} dims ({m.node_dim}, {m.edge_dim}) "
                f"do not match dataset dims ({node_dim}, {edge_dim})")


def embed(models, graph, schedule: AnnealSchedule = AnnealSchedule(),
          compats=None) -> LikelihoodEmbedding:
    """One log-likelihood feature per prototype model, in model order."""
    if not models:
        raise EmbeddingError("at least one prototype model required")
    _check_dims(models, graph.node_dim, graph.edge_dim)
    compats = compats or [likelihood_compatibility(m) for m in models]
    feats = np.array([best_log_likelihood(m, graph, schedule, compat=c)
                      for m, c in zip(models, compats)])
    return LikelihoodEmbedding(graph.graph_id, graph.label, feats)


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("RAGKIT_THREADS", "1")))
    except ValueError:
        return 1


def embed_dataset(models, dataset: GraphDataset,
                  schedule: AnnealSchedule = AnnealSchedule()) -> list:
    """Embed every graph, dataset order preserved (|dataset| * K match calls)."""
    if not models:
        raise EmbeddingError("at least one prototype model required")
    _check_dims(models, dataset.node_dim, dataset.edge_dim)
    compats = [likelihood_compatibility(m) for m in models]
    threads = _thread_cap()
    if threads > 1 and len(dataset.graphs) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(
                lambda g: embed(models, g, schedule, compats), dataset.graphs))
    return [embed(models, g, schedule, compats) for g in dataset.graphs]


def standardization_stats(embeddings) -> dict:
    """Per-coordinate mean/std from a training split; std floored at 1e-12."""
    if not embeddings:
        raise EmbeddingError("cannot compute statistics from an empty split")
    feats = np.stack([e.features for e in embeddings])
    return {"mean": [float(x) for x in feats.mean(axis=0)],
            "std": [float(max(x, 1e-12)) for x in feats.std(axis=0)]}


def apply_standardization(embeddings, stats: dict) -> list:
    mean = np.asarray(stats["mean"], float)
    std = np.asarray(stats["std"], float)
    return [LikelihoodEmbedding(e.graph_id, e.label, (e.features - mean) / std)
            for e in embeddings]


def write_embeddings_csv(path, embeddings, n_features: int | None = None) -> None:
    if n_features is None:
        if not embeddings:
            raise EmbeddingError("feature count needed for an empty embedding file")
        n_features = len(embeddings[0].features)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["graph_id", "label"] + [f"f{k}" for k in range(n_features)])
        for e in embeddings:
            w.writerow([e.graph_id, "" if e.label is None else e.label]
                       + [repr(float(x)) for x in e.features])


def read_embeddings_csv(path) -> list:
    out = []
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            feats = [float(v) for k, v in row.items() if k.startswith("f")]
            out.append(LikelihoodEmbedding(row["graph_id"], row["label"] or None,
                                           np.array(feats)))
    return out


def write_stats_json(path, stats: dict) -> None:
    Path(path).write_text(json.dumps(stats, sort_keys=True, indent=1), encoding="utf-8")


def read_stats_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
