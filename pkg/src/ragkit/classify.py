"""Classifiers and evaluation: graph-domain kNN, max-likelihood argmax rule,
kernel max-margin classification on likelihood features, ROC/AUC, and paired
significance testing."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matcher
from .graphs import GraphDataset
from .matcher import AnnealSchedule, attribute_compatibility


class ClassifyError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    graph_id: str
    true_label: str | None
    pred_label: str
    score: float


@dataclass
class PredictionSet:
    records: list
    categories: tuple

    def __post_init__(self):
        self.categories = tuple(self.categories)

    def accuracy(self) -> float:
        if not self.records:
            return 0.0
        hits = sum(1 for r in self.records if r.pred_label == r.true_label)
        return hits / len(self.records)

    def per_class_accuracy(self) -> dict:
        out = {}
        for c in self.categories:
            rows = [r for r in self.records if r.true_label == c]
            out[c] = (sum(1 for r in rows if r.pred_label == c) / len(rows)
                      if rows else None)
        return out

    def confusion(self) -> list:
        idx = {c: k for k, c in enumerate(self.categories)}
        mat = [[0] * len(self.categories) for _ in self.categories]
        for r in self.records:
            if r.true_label in idx:
                mat[idx[r.true_label]][idx[r.pred_label]] += 1
        return mat


def write_predictions_csv(path, preds: PredictionSet) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["graph_id", "true_label", "pred_label", "score"])
        for r in preds.records:
            w.writerow([r.graph_id, "" if r.true_label is None else r.true_label,
                        r.pred_label, repr(float(r.score))])


def read_predictions_csv(path, categories) -> PredictionSet:
    records = []
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(PredictionRecord(row["graph_id"], row["true_label"] or None,
                                            row["pred_label"], float(row["score"])))
    return PredictionSet(records, tuple(categories))


# ---------------------------------------------------------------------------
# Graph-domain kNN baseline

def graph_distance_matrix(left, right, schedule: AnnealSchedule = AnnealSchedule(),
                          bandwidth: float = 1.0) -> np.ndarray:
    """Symmetrized negated match scores: d(a, b) = -(s(a->b) + s(b->a)) / 2."""
    compat = attribute_compatibility(bandwidth)
    dist = np.zeros((len(left), len(right)))
    for i, a in enumerate(left):
        for j, b in enumerate(right):
            _, _, s_ab = matcher.match(a, b, compat, schedule)
            _, _, s_ba = matcher.match(b, a, compat, schedule)
            dist[i, j] = -0.5 * (s_ab + s_ba)
    return dist


def pairwise_distance_matrix(graphs, schedule: AnnealSchedule = AnnealSchedule(),
                             bandwidth: float = 1.0) -> np.ndarray:
    """Symmetric all-pairs distance matrix; only i < j pairs are matched."""
    compat = attribute_compatibility(bandwidth)
    n = len(graphs)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            _, _, s_ij = matcher.match(graphs[i], graphs[j], compat, schedule)
            _, _, s_ji = matcher.match(graphs[j], graphs[i], compat, schedule)
            dist[i, j] = dist[j, i] = -0.5 * (s_ij + s_ji)
    return dist


def knn_vote(distances: np.ndarray, train_labels, categories, k: int):
    """Majority vote among k nearest; ties go to the smaller category index."""
    order = np.argsort(distances, kind="stable")[:k]
    votes = {c: 0 for c in categories}
    for j in order:
        votes[train_labels[j]] += 1
    best = max(categories, key=lambda c: (votes[c], -categories.index(c)))
    return best, votes[best] / k


def knn_graph_classify(train: GraphDataset, test: GraphDataset, k: int,
                       schedule: AnnealSchedule = AnnealSchedule(),
                       distances: np.ndarray | None = None) -> PredictionSet:
    """kNN in the graph domain under the symmetric graduated-assignment distance.

    ``distances`` (|test| x |train|) may be supplied to reuse a precomputed
    matrix; otherwise it is computed here.
    """
    if not train.graphs:
        raise ClassifyError("empty training set")
    if k % 2 == 0 or k > len(train.graphs):
        raise ClassifyError(f"k={k} must be odd and at most |train|={len(train.graphs)}")
    if distances is None:
        distances = graph_distance_matrix(test.graphs, train.graphs, schedule)
    labels = [g.label for g in train.graphs]
    cats = tuple(train.categories)
    records = []
    for i, g in enumerate(test.graphs):
        pred, score = knn_vote(distances[i], labels, cats, k)
        records.append(PredictionRecord(g.graph_id, g.label, pred, score))
    return PredictionSet(records, cats)


def knn_select_k(train: GraphDataset, candidates,
                 schedule: AnnealSchedule = AnnealSchedule(),
                 distances: np.ndarray | None = None) -> int:
    """Leave-one-out selection of k on the training split (ties: smaller k)."""
    if distances is None:
        distances = graph_distance_matrix(train.graphs, train.graphs, schedule)
    labels = [g.label for g in train.graphs]
    cats = tuple(train.categories)
    n = len(train.graphs)
    best_k, best_acc = None, -1.0
    for k in candidates:
        if k % 2 == 0 or k > n - 1:
            continue
        hits = 0
        for i in range(n):
            d = distances[i].copy()
            d[i] = np.inf  # leave self out
            pred, _ = knn_vote(d, labels, cats, k)
            hits += pred == labels[i]
        acc = hits / n
        if acc > best_acc:
            best_k, best_acc = k, acc
    if best_k is None:
        raise ClassifyError("no admissible k among candidates")
    return best_k


# ---------------------------------------------------------------------------
# Maximum-likelihood argmax rule on embedding features

def rag_ml_classify(embeddings, categories) -> PredictionSet:
    """Assign each graph to the prototype with the highest log-likelihood
    feature; score is the margin over the runner-up."""
    categories = tuple(categories)
    if len(categories) < 2:
        raise ClassifyError("need at least two categories")
    records = []
    for e in embeddings:
        feats = np.asarray(e.features, float)
        if len(feats) != len(categories):
            raise ClassifyError("feature count does not match category count")
        best = int(np.argmax(feats))  # first max wins: smaller category index
        rest = np.delete(feats, best)
        margin = float(feats[best] - rest.max()) if rest.size else 0.0
        records.append(PredictionRecord(e.graph_id, e.label, categories[best], margin))
    return PredictionSet(records, categories)


# ---------------------------------------------------------------------------
# Kernel max-margin classifier (SMO dual solver)

@dataclass(frozen=True)
class KernelSpec:
    kind: str  # "polynomial" | "gaussian"
    degree: int = 3
    gamma: float = 1.0
    C: float = 1.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "gaussian"):
            raise ClassifyError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 1:
            raise ClassifyError("polynomial degree must be >= 1")
        if self.kind == "gaussian" and self.gamma <= 0:
            raise ClassifyError("gaussian gamma must be positive")
        if self.C <= 0:
            raise ClassifyError("C must be positive")

    def matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.kind == "polynomial":
            return (a @ b.T + 1.0) ** self.degree
        sq = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
              - 2.0 * (a @ b.T))
        return np.exp(-self.gamma * np.maximum(sq, 0.0))


def _smo_solve(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3,
               eps: float = 1e-8, max_passes: int = 200):
    """Platt-style SMO on a precomputed kernel matrix; deterministic working-set
    selection (max |E_i - E_j| over non-bound points, ties to smallest index)."""
    n = len(y)
    alpha = np.zeros(n)
    b = 0.0
    errors = -y.astype(float)  # f(x) - y with alpha = 0, b = 0

    def take_step(i1, i2):
        nonlocal b
        if i1 == i2:
            return False
        a1, a2 = alpha[i1], alpha[i2]
        y1, y2 = y[i1], y[i2]
        e1, e2 = errors[i1], errors[i2]
        s = y1 * y2
        if s > 0:
            lo, hi = max(0.0, a1 + a2 - C), min(C, a1 + a2)
        else:
            lo, hi = max(0.0, a2 - a1), min(C, C + a2 - a1)
        if hi - lo < eps:
            return False
        k11, k12, k22 = K[i1, i1], K[i1, i2], K[i2, i2]
        eta = k11 + k22 - 2.0 * k12
        if eta > 0:
            a2_new = a2 + y2 * (e1 - e2) / eta
            a2_new = min(max(a2_new, lo), hi)
        else:
            # Objective at the interval ends (flat or concave direction).
            f1 = y1 * (e1 + b) - a1 * k11 - s * a2 * k12
            f2 = y2 * (e2 + b) - s * a1 * k12 - a2 * k22
            l1 = a1 + s * (a2 - lo)
            h1 = a1 + s * (a2 - hi)
            obj_lo = (l1 * f1 + lo * f2 + 0.5 * l1 * l1 * k11
                      + 0.5 * lo * lo * k22 + s * lo * l1 * k12)
            obj_hi = (h1 * f1 + hi * f2 + 0.5 * h1 * h1 * k11
                      + 0.5 * hi * hi * k22 + s * hi * h1 * k12)
            if obj_lo < obj_hi - eps:
                a2_new = lo
            elif obj_lo > obj_hi + eps:
                a2_new = hi
            else:
                a2_new = a2
        if abs(a2_new - a2) < eps * (a2_new + a2 + eps):
            return False
        a1_new = a1 + s * (a2 - a2_new)
        b1 = e1 + y1 * (a1_new - a1) * k11 + y2 * (a2_new - a2) * k12 + b
        b2 = e2 + y1 * (a1_new - a1) * k12 + y2 * (a2_new - a2) * k22 + b
        if 0 < a1_new < C:
            b_new = b1
        elif 0 < a2_new < C:
            b_new = b2
        else:
            b_new = (b1 + b2) / 2.0
        errors[:] += (y1 * (a1_new - a1) * K[i1] + y2 * (a2_new - a2) * K[i2]
                      + (b - b_new))
        alpha[i1], alpha[i2] = a1_new, a2_new
        b = b_new
        return True

    def examine(i2):
        e2, a2, y2 = errors[i2], alpha[i2], y[i2]
        r2 = e2 * y2
        if not ((r2 < -tol and a2 < C) or (r2 > tol and a2 > 0)):
            return False
        non_bound = np.flatnonzero((alpha > 0) & (alpha < C))
        if len(non_bound) > 1:
            gaps = np.abs(errors[non_bound] - e2)
            i1 = int(non_bound[int(np.argmax(gaps))])
            if take_step(i1, i2):
                return True
        for i1 in non_bound:
            if take_step(int(i1), i2):
                return True
        for i1 in range(n):
            if take_step(i1, i2):
                return True
        return False

    examine_all = True
    for _ in range(max_passes):
        changed = 0
        idx = range(n) if examine_all else np.flatnonzero((alpha > 0) & (alpha < C))
        for i in idx:
            changed += examine(int(i))
        if examine_all:
            examine_all = False
            if changed == 0:
                break
        elif changed == 0:
            examine_all = True
    return alpha, b


@dataclass
class SvmState:
    kernel: KernelSpec
    categories: tuple
    support: np.ndarray             # training feature matrix
    coef: np.ndarray                # (n_categories, n_train) alpha * y per one-vs-rest task
    intercept: np.ndarray           # (n_categories,)


def svm_train(embeddings, kernel: KernelSpec, categories=None) -> SvmState:
    """One-vs-rest soft-margin kernel classifier trained with SMO."""
    labels = [e.label for e in embeddings]
    if categories is None:
        categories = tuple(sorted(set(labels)))
    categories = tuple(categories)
    present = set(labels)
    if len(present) < 2:
        raise ClassifyError("training data must contain at least two categories")
    x = np.stack([e.features for e in embeddings])
    K = kernel.matrix(x, x)
    coef = np.zeros((len(categories), len(embeddings)))
    intercept = np.zeros(len(categories))
    for k, c in enumerate(categories):
        y = np.where(np.array(labels) == c, 1.0, -1.0)
        alpha, b = _smo_solve(K, y, kernel.C)
        coef[k] = alpha * y
        intercept[k] = -b  # decision f(x) = sum coef * k(x_i, x) - b
    return SvmState(kernel, categories, x, coef, intercept)


def svm_decision(state: SvmState, features: np.ndarray) -> np.ndarray:
    """Decision values, shape (n_points, n_categories)."""
    features = np.atleast_2d(np.asarray(features, float))
    if features.shape[1] != state.support.shape[1]:
        raise ClassifyError(
            f"feature dimension {features.shape[1]} does not match "
            f"training dimension {state.support.shape[1]}")
    K = state.kernel.matrix(features, state.support)
    return K @ state.coef.T + state.intercept


def svm_predict(state: SvmState, embeddings) -> PredictionSet:
    records = []
    if embeddings:
        x = np.stack([e.features for e in embeddings])
        dv = svm_decision(state, x)
        for e, row in zip(embeddings, dv):
            best = int(np.argmax(row))
            records.append(PredictionRecord(e.graph_id, e.label,
                                            state.categories[best], float(row[best])))
    return PredictionSet(records, state.categories)


def default_kernel_grid():
    grid = [KernelSpec("polynomial", degree=d, C=c)
            for d in (1, 2, 3) for c in (0.1, 1.0, 10.0, 100.0)]
    grid += [KernelSpec("gaussian", gamma=g, C=c)
             for g in (0.01, 0.1, 1.0, 10.0) for c in (0.1, 1.0, 10.0, 100.0)]
    return grid


def _stratified_folds(labels, folds: int):
    """Deterministic round-robin fold ids per class, in input order."""
    by_class = {}
    fold_of = [0] * len(labels)
    for i, lab in enumerate(labels):
        k = by_class.get(lab, 0)
        fold_of[i] = k % folds
        by_class[lab] = k + 1
    smallest = min(by_class.values())
    if folds > smallest:
        raise ClassifyError(f"folds={folds} exceeds smallest class size {smallest}")
    return fold_of


def model_select(train_embeddings, grid=None, folds: int = 5) -> KernelSpec:
    """Pick the grid point with the best stratified CV accuracy (ties: first)."""
    if folds < 2:
        raise ClassifyError("folds must be >= 2")
    grid = list(grid) if grid is not None else default_kernel_grid()
    if not grid:
        raise ClassifyError("empty hyperparameter grid")
    labels = [e.label for e in train_embeddings]
    categories = tuple(sorted(set(labels)))
    fold_of = _stratified_folds(labels, folds)
    best_spec, best_acc = None, -1.0
    for spec in grid:
        hits = total = 0
        for f in range(folds):
            tr = [e for e, fo in zip(train_embeddings, fold_of) if fo != f]
            va = [e for e, fo in zip(train_embeddings, fold_of) if fo == f]
            if not va or len({e.label for e in tr}) < 2:
                continue
            state = svm_train(tr, spec, categories)
            preds = svm_predict(state, va)
            hits += sum(1 for r in preds.records if r.pred_label == r.true_label)
            total += len(va)
        acc = hits / total if total else 0.0
        if acc > best_acc:
            best_spec, best_acc = spec, acc
    return best_spec


# ---------------------------------------------------------------------------
# Metrics

def oriented_scores(predictions: PredictionSet, positive: str):
    """Scores oriented so larger favors the positive class, plus 0/1 truths."""
    scores, truths = [], []
    for r in predictions.records:
        scores.append(r.score if r.pred_label == positive else -r.score)
        truths.append(1 if r.true_label == positive else 0)
    return np.array(scores, float), np.array(truths, int)


def auc_from_scores(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC via fractional ranks; ties contribute one half."""
    pos = np.asarray(pos_scores, float)
    neg = np.asarray(neg_scores, float)
    if len(pos) == 0 or len(neg) == 0:
        raise ClassifyError("both classes must be present")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(len(combined))
    sorted_vals = combined[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j < len(sorted_vals) and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0  # mean rank, 1-based
        i = j
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def roc_auc(predictions: PredictionSet, positive: str | None = None) -> float:
    """AUC of a 2-class PredictionSet; scores are oriented toward ``positive``
    (default: the second declared category)."""
    if len(predictions.categories) != 2:
        raise ClassifyError("roc_auc requires exactly two categories")
    positive = positive if positive is not None else predictions.categories[1]
    scores, truths = oriented_scores(predictions, positive)
    if truths.min() == truths.max():
        raise ClassifyError("both classes must be present in the predictions")
    return auc_from_scores(scores[truths == 1], scores[truths == 0])


def roc_points(predictions: PredictionSet, positive: str | None = None):
    """ROC curve as (fpr, tpr) points at every score threshold."""
    if len(predictions.categories) != 2:
        raise ClassifyError("roc requires exactly two categories")
    positive = positive if positive is not None else predictions.categories[1]
    scores, truths = oriented_scores(predictions, positive)
    n_pos = int(truths.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ClassifyError("both classes must be present in the predictions")
    order = np.argsort(-scores, kind="stable")
    points = [(0.0, 0.0)]
    tp = fp = 0
    k = 0
    while k < len(order):
        j = k
        thr = scores[order[k]]
        while j < len(order) and scores[order[j]] == thr:
            tp += int(truths[order[j]] == 1)
            fp += int(truths[order[j]] == 0)
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        k = j
    return points


def significance_test(a: PredictionSet, b: PredictionSet, alpha: float = 0.05):
    """Exact McNemar test on discordant pairs; returns (p_value, significant)."""
    ids_a = [r.graph_id for r in a.records]
    ids_b = [r.graph_id for r in b.records]
    if ids_a != ids_b:
        raise ClassifyError("prediction sets cover different graphs or orders")
    n01 = n10 = 0
    for ra, rb in zip(a.records, b.records):
        ok_a = ra.pred_label == ra.true_label
        ok_b = rb.pred_label == rb.true_label
        n01 += ok_a and not ok_b
        n10 += ok_b and not ok_a
    n = n01 + n10
    if n == 0:
        return 1.0, False
    k = min(n01, n10)
    tail = sum(math.comb(n, i) for i in range(k + 1)) * 0.5 ** n
    p = min(1.0, 2.0 * tail)
    return float(p), bool(p < alpha)
