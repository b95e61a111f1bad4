"""Graduated-assignment graph matching with softassign normalization.

Matches a source attributed graph against a target (another graph or a
random-graph model) by annealing a doubly-stochastic match matrix, then
discretizing it into a partial injective node/edge morphism. Compatibilities
are log-space scores; the softassign step exponentiates exp(beta * c) with
per-row max subtraction so Gaussian log-densities never underflow.
"""
from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass

import numpy as np

from .gaussian import log_density_many

try:  # optional JIT for the anneal loop; numpy fallback has identical semantics
    if os.environ.get("RAGKIT_NO_NUMBA"):
        raise ImportError
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False

NEG_CLIP = -1e30
DEFAULT_SLACK = float(np.log(1e-6))
_FLOOR = 1e-300


class MatchError(ValueError):
    """Matching precondition violated."""


@dataclass(frozen=True)
class AnnealSchedule:
    """Annealing parameters for graduated assignment."""

    beta_initial: float = 0.5
    beta_rate: float = 1.075
    beta_final: float = 10.0
    sinkhorn_iters: int = 30
    assignment_iters_per_beta: int = 4

    def __post_init__(self):
        if not (self.beta_initial > 0 and self.beta_final > 0):
            raise MatchError("beta bounds must be positive")
        if self.beta_initial >= self.beta_final:
            raise MatchError("beta_initial must be below beta_final")
        if self.beta_rate <= 1.0:
            raise MatchError("beta_rate must exceed 1")
        if self.sinkhorn_iters < 1 or self.assignment_iters_per_beta < 1:
            raise MatchError("iteration counts must be positive")


@dataclass(frozen=True)
class Compatibility:
    """Log-space compatibilities between source and target elements.

    ``node`` is (n_source, n_target), ``edge`` is (m_source, m_target);
    ``slack`` is the per-element score of leaving something unmatched.
    """

    node: np.ndarray
    edge: np.ndarray
    slack: float = DEFAULT_SLACK


@dataclass(frozen=True)
class Morphism:
    """Partial injective mapping of source nodes/edges into target elements.

    Unmatched entries are explicit ``None``; ``edge_map`` is derived from
    ``node_map``: a source edge maps only when both endpoints map onto the
    endpoints of a target edge.
    """

    node_map: tuple  # int | None per source node
    edge_map: tuple  # int | None per source edge


def validate_morphism(morphism: Morphism, source, target) -> None:
    """Structural check: injectivity plus edge-endpoint consistency."""
    n_t = target.n_nodes
    mapped = [m for m in morphism.node_map if m is not None]
    if len(morphism.node_map) != source.n_nodes:
        raise MatchError("node_map length mismatch")
    if len(morphism.edge_map) != source.n_edges:
        raise MatchError("edge_map length mismatch")
    if any(not (0 <= m < n_t) for m in mapped):
        raise MatchError("node_map target index out of range")
    if len(set(mapped)) != len(mapped):
        raise MatchError("node_map not injective")
    t_edges = {tuple(sorted(e)): k for k, e in enumerate(target.edge_endpoints)}
    for e, te in enumerate(morphism.edge_map):
        if te is None:
            continue
        u, v = source.edge_endpoints[e]
        mu, mv = morphism.node_map[u], morphism.node_map[v]
        if mu is None or mv is None:
            raise MatchError(f"edge {e} mapped but an endpoint is unmatched")
        if t_edges.get((min(mu, mv), max(mu, mv))) != te:
            raise MatchError(f"edge {e} mapped inconsistently with its endpoints")


_counter_lock = threading.Lock()
_match_calls = 0


def match_call_count() -> int:
    return _match_calls


def reset_match_counter() -> int:
    """Reset the global match counter; returns the previous value."""
    global _match_calls
    with _counter_lock:
        prev = _match_calls
        _match_calls = 0
    return prev


def _bump_counter() -> None:
    global _match_calls
    with _counter_lock:
        _match_calls += 1


def sinkhorn_normalize(m: np.ndarray, iters: int, slack: bool = True) -> np.ndarray:
    """Alternate row/column normalization ``iters`` times.

    With ``slack`` the last row and column are treated as slack: they join the
    opposing sums but are never normalized themselves.
    """
    m = np.asarray(m, dtype=np.float64)
    if np.any(m <= 0.0):
        raise MatchError("sinkhorn_normalize requires strictly positive entries")
    out = m.copy()
    rows = out.shape[0] - 1 if slack else out.shape[0]
    cols = out.shape[1] - 1 if slack else out.shape[1]
    for _ in range(iters):
        if rows > 0:
            out[:rows] /= out[:rows].sum(axis=1, keepdims=True)
        if cols > 0:
            out[:, :cols] /= out[:, :cols].sum(axis=0, keepdims=True)
    return out


def _target_structure(target):
    return target.n_nodes, tuple(tuple(sorted(e)) for e in target.edge_endpoints)


def _anneal_numpy(c_node, sa, sb, ta, tb, ce, slack, schedule):
    n_s, n_t = c_node.shape
    m = np.ones((n_s + 1, n_t + 1))
    beta = schedule.beta_initial
    while beta <= schedule.beta_final * (1 + 1e-12):
        for _ in range(schedule.assignment_iters_per_beta):
            q = np.full((n_s + 1, n_t + 1), slack)
            q[:n_s, :n_t] = c_node
            if len(ce):
                core = q[:n_s, :n_t]
                np.add.at(core, (sa, ta), m[sb, tb] * ce)
                np.add.at(core, (sa, tb), m[sb, ta] * ce)
                np.add.at(core, (sb, ta), m[sa, tb] * ce)
                np.add.at(core, (sb, tb), m[sa, ta] * ce)
            q -= q.max(axis=1, keepdims=True)
            m = np.maximum(np.exp(beta * q), _FLOOR)
            m = sinkhorn_normalize(m, schedule.sinkhorn_iters)
        beta *= schedule.beta_rate
    return m


if _HAVE_NUMBA:

    @njit(cache=True, fastmath=True)
    def _anneal_jit(c_node, sa, sb, ta, tb, ce, slack,
                    beta0, rate, beta_final, sink_iters, assign_iters):  # pragma: no cover
        n_s, n_t = c_node.shape
        m = np.ones((n_s + 1, n_t + 1))
        q = np.empty((n_s + 1, n_t + 1))
        beta = beta0
        while beta <= beta_final * (1 + 1e-12):
            for _ in range(assign_iters):
                for a in range(n_s + 1):
                    for i in range(n_t + 1):
                        q[a, i] = slack
                for a in range(n_s):
                    for i in range(n_t):
                        q[a, i] = c_node[a, i]
                for k in range(len(ce)):
                    c = ce[k]
                    q[sa[k], ta[k]] += m[sb[k], tb[k]] * c
                    q[sa[k], tb[k]] += m[sb[k], ta[k]] * c
                    q[sb[k], ta[k]] += m[sa[k], tb[k]] * c
                    q[sb[k], tb[k]] += m[sa[k], ta[k]] * c
                for a in range(n_s + 1):
                    row_max = q[a, 0]
                    for i in range(1, n_t + 1):
                        if q[a, i] > row_max:
                            row_max = q[a, i]
                    for i in range(n_t + 1):
                        val = np.exp(beta * (q[a, i] - row_max))
                        m[a, i] = val if val > 1e-300 else 1e-300
                for _ in range(sink_iters):
                    for a in range(n_s):
                        s = 0.0
                        for i in range(n_t + 1):
                            s += m[a, i]
                        inv = 1.0 / s
                        for i in range(n_t + 1):
                            m[a, i] *= inv
                    for i in range(n_t):
                        s = 0.0
                        for a in range(n_s + 1):
                            s += m[a, i]
                        inv = 1.0 / s
                        for a in range(n_s + 1):
                            m[a, i] *= inv
            beta *= rate
        return m


def _anneal(c_node, sa, sb, ta, tb, ce, slack, schedule):
    if _HAVE_NUMBA:
        return _anneal_jit(c_node, sa, sb, ta, tb, ce, float(slack),
                           float(schedule.beta_initial), float(schedule.beta_rate),
                           float(schedule.beta_final), schedule.sinkhorn_iters,
                           schedule.assignment_iters_per_beta)
    return _anneal_numpy(c_node, sa, sb, ta, tb, ce, slack, schedule)


def _discretize(m: np.ndarray, n_s: int, n_t: int):
    """Greedy global-max assignment; slack column entries send rows to None.

    Ties resolve to the lowest (source, target) pair: np.argmax scans
    row-major, which is exactly that order.
    """
    work = m[:n_s, :n_t + 1].copy()  # includes slack column n_t
    node_map = [None] * n_s
    row_open = np.ones(n_s, dtype=bool)
    col_open = np.ones(n_t + 1, dtype=bool)  # slack column stays open
    for _ in range(n_s):
        masked = np.where(row_open[:, None] & col_open[None, :], work, -np.inf)
        flat = int(np.argmax(masked))
        a, i = divmod(flat, n_t + 1)
        if not row_open[a]:
            break
        row_open[a] = False
        if i < n_t:
            node_map[a] = i
            col_open[i] = False
    return node_map


def _derive_edge_map(node_map, source, t_edge_index):
    edge_map = []
    for (u, v) in source.edge_endpoints:
        mu, mv = node_map[u], node_map[v]
        if mu is None or mv is None:
            edge_map.append(None)
        else:
            edge_map.append(t_edge_index.get((min(mu, mv), max(mu, mv))))
    return edge_map


def _local_one(a, nm, c_node, c_edge, slack, te, inc_ptr, inc_e, inc_o):
    """Score contribution of source node ``a`` and its incident edges.

    ``nm`` maps source nodes to target indices (-1 for slack), ``te`` is the
    dense target edge index (-1 for absent pairs), ``inc_*`` a CSR layout of
    (edge index, other endpoint) per source node.
    """
    i = nm[a]
    s = c_node[a, i] if i >= 0 else slack
    for idx in range(inc_ptr[a], inc_ptr[a + 1]):
        mv = nm[inc_o[idx]]
        if i < 0 or mv < 0:
            s += slack
        else:
            t = te[i, mv]
            s += c_edge[inc_e[idx], t] if t >= 0 else slack
    return s


def _local_pair(a, b, nm, c_node, c_edge, slack, te, inc_ptr, inc_e, inc_o):
    s = (_local_one(a, nm, c_node, c_edge, slack, te, inc_ptr, inc_e, inc_o)
         + _local_one(b, nm, c_node, c_edge, slack, te, inc_ptr, inc_e, inc_o))
    # edges joining a and b were counted from both sides; remove one copy
    for idx in range(inc_ptr[a], inc_ptr[a + 1]):
        if inc_o[idx] == b:
            mu, mv = nm[a], nm[b]
            if mu < 0 or mv < 0:
                s -= slack
            else:
                t = te[mu, mv]
                s -= c_edge[inc_e[idx], t] if t >= 0 else slack
    return s


def _refine_core(nm, c_node, c_edge, slack, te, inc_ptr, inc_e, inc_o):
    """Deterministic hill climbing on the discrete assignment score.

    Scans single-node reassignments (to any unused target or to slack),
    pairwise swaps, and evictions (claim an occupied target, its previous
    owner goes to slack) in a fixed order, applying each strictly improving
    move, until a full pass finds none. Moves are scored incrementally
    through the terms that touch the moved nodes.
    """
    n_s = nm.shape[0]
    n_t = c_node.shape[1]
    best = 0.0
    for a in range(n_s):
        best += _local_one(a, nm, c_node, c_edge, slack, te,
                           inc_ptr, inc_e, inc_o)
        for idx in range(inc_ptr[a], inc_ptr[a + 1]):
            if inc_o[idx] < a:  # each edge term was added from both endpoints
                mu, mv = nm[a], nm[inc_o[idx]]
                if mu < 0 or mv < 0:
                    best -= slack
                else:
                    t = te[mu, mv]
                    best -= c_edge[inc_e[idx], t] if t >= 0 else slack
    used = np.zeros(n_t, np.bool_)
    owner = np.full(n_t, -1, np.int64)
    for a in range(n_s):
        if nm[a] >= 0:
            used[nm[a]] = True
            owner[nm[a]] = a
    for _ in range(200):
        improved = False
        for a in range(n_s):
            before = _local_one(a, nm, c_node, c_edge, slack, te,
                                inc_ptr, inc_e, inc_o)
            for cand in range(-1, n_t):
                orig = nm[a]
                if cand == orig or (cand >= 0 and used[cand]):
                    continue
                nm[a] = cand
                after = _local_one(a, nm, c_node, c_edge, slack, te,
                                   inc_ptr, inc_e, inc_o)
                if after > before + 1e-12:
                    best += after - before
                    before = after
                    if orig >= 0:
                        used[orig] = False
                        owner[orig] = -1
                    if cand >= 0:
                        used[cand] = True
                        owner[cand] = a
                    improved = True
                else:
                    nm[a] = orig
        for a in range(n_s):
            for b in range(a + 1, n_s):
                if nm[a] == nm[b]:
                    continue
                before = _local_pair(a, b, nm, c_node, c_edge, slack, te,
                                     inc_ptr, inc_e, inc_o)
                nm[a], nm[b] = nm[b], nm[a]
                after = _local_pair(a, b, nm, c_node, c_edge, slack, te,
                                    inc_ptr, inc_e, inc_o)
                if after > before + 1e-12:
                    best += after - before
                    if nm[a] >= 0:
                        owner[nm[a]] = a
                    if nm[b] >= 0:
                        owner[nm[b]] = b
                    improved = True
                else:
                    nm[a], nm[b] = nm[b], nm[a]
        for a in range(n_s):
            for i in range(n_t):
                b = owner[i]
                if b < 0 or b == a:
                    continue
                before = _local_pair(a, b, nm, c_node, c_edge, slack, te,
                                     inc_ptr, inc_e, inc_o)
                prev = nm[a]
                nm[a], nm[b] = i, -1
                after = _local_pair(a, b, nm, c_node, c_edge, slack, te,
                                    inc_ptr, inc_e, inc_o)
                if after > before + 1e-12:
                    best += after - before
                    owner[i] = a
                    used[i] = True
                    if prev >= 0:
                        owner[prev] = -1
                        used[prev] = False
                    improved = True
                else:
                    nm[a], nm[b] = prev, i
        if not improved:
            break
    return best


if _HAVE_NUMBA:
    _local_one = njit(cache=True)(_local_one)
    _local_pair = njit(cache=True)(_local_pair)
    _refine_core = njit(cache=True)(_refine_core)


def _refine(node_map, source, n_t, t_edge_index, c_node, c_edge, slack):
    """Polish a discrete assignment; returns (node_map list, score)."""
    n_s = len(node_map)
    nm = np.array([-1 if i is None else i for i in node_map], np.int64)
    te = np.full((n_t, n_t), -1, np.int64)
    for (u, v), k in t_edge_index.items():
        te[u, v] = te[v, u] = k
    deg = np.zeros(n_s + 1, np.int64)
    for u, v in source.edge_endpoints:
        deg[u + 1] += 1
        deg[v + 1] += 1
    inc_ptr = np.cumsum(deg)
    fill = inc_ptr[:-1].copy()
    inc_e = np.zeros(source.n_edges * 2, np.int64)
    inc_o = np.zeros(source.n_edges * 2, np.int64)
    for e, (u, v) in enumerate(source.edge_endpoints):
        inc_e[fill[u]], inc_o[fill[u]] = e, v
        fill[u] += 1
        inc_e[fill[v]], inc_o[fill[v]] = e, u
        fill[v] += 1
    best = _refine_core(nm, np.ascontiguousarray(c_node),
                        np.ascontiguousarray(c_edge), float(slack), te,
                        inc_ptr, inc_e, inc_o)
    return [None if i < 0 else int(i) for i in nm], float(best)


# Exact search handles at most this many injective partial assignments.
_EXACT_LIMIT = 20000


def _exact_budget(n_s: int, n_t: int) -> int:
    total = 0
    for k in range(min(n_s, n_t) + 1):
        total += math.comb(n_s, k) * math.perm(n_t, k)
        if total > _EXACT_LIMIT:
            break
    return total


def _exact_assignment(source, n_t, t_edge_index, c_node, c_edge, slack):
    """Depth-first search over every injective partial node assignment.

    Each edge is charged at its higher-indexed endpoint, so partial scores are
    exact and the first-found maximum is deterministic.
    """
    n_s = source.n_nodes
    later = [[] for _ in range(n_s)]
    for e, (u, v) in enumerate(source.edge_endpoints):
        later[max(u, v)].append((e, min(u, v)))
    assignment = [None] * n_s
    used = [False] * n_t
    best_map, best_score = list(assignment), -np.inf

    def rec(a, score):
        nonlocal best_map, best_score
        if a == n_s:
            if score > best_score:
                best_map, best_score = assignment.copy(), score
            return
        assignment[a] = None
        rec(a + 1, score + slack + slack * len(later[a]))
        for i in range(n_t):
            if used[i]:
                continue
            s = score + c_node[a, i]
            for e, b in later[a]:
                mb = assignment[b]
                if mb is None:
                    s += slack
                else:
                    te = t_edge_index.get((min(i, mb), max(i, mb)))
                    s += c_edge[e, te] if te is not None else slack
            assignment[a] = i
            used[i] = True
            rec(a + 1, s)
            used[i] = False
        assignment[a] = None

    rec(0, 0.0)
    return best_map, best_score


def match(source, target, compat, schedule: AnnealSchedule = AnnealSchedule()):
    """Graduated-assignment match; returns (Morphism, soft match matrix, score).

    ``compat`` is a Compatibility or a callable (source, target) -> Compatibility.
    Deterministic given identical inputs and schedule.
    """
    _bump_counter()
    if source.n_nodes == 0:
        raise MatchError("empty source graph")
    if callable(compat):
        compat = compat(source, target)

    n_s, m_s = source.n_nodes, source.n_edges
    n_t, t_edges = _target_structure(target)
    t_edge_index = {e: k for k, e in enumerate(t_edges)}
    slack = float(compat.slack)

    if n_t == 0:
        morphism = Morphism((None,) * n_s, (None,) * m_s)
        soft = np.ones((n_s + 1, 1))
        return morphism, soft, slack * (n_s + m_s)

    c_node = np.clip(np.asarray(compat.node, dtype=np.float64), NEG_CLIP, None)
    if c_node.shape != (n_s, n_t):
        raise MatchError(f"node compatibility shape {c_node.shape}, expected {(n_s, n_t)}")
    m_t = len(t_edges)
    c_edge = np.clip(np.asarray(compat.edge, dtype=np.float64), NEG_CLIP, None)
    c_edge = c_edge.reshape(m_s, m_t)

    # The anneal runs on slack-shifted compatibilities (c - slack, slack -> 0):
    # every source element pays either its compatibility or slack, so shifting
    # preserves the assignment objective while making structural consistency a
    # non-negative reward, which the softassign continuation requires.
    if m_s and m_t:
        sa = np.repeat(np.array([e[0] for e in source.edge_endpoints], np.int64), m_t)
        sb = np.repeat(np.array([e[1] for e in source.edge_endpoints], np.int64), m_t)
        ta = np.tile(np.array([e[0] for e in t_edges], np.int64), m_s)
        tb = np.tile(np.array([e[1] for e in t_edges], np.int64), m_s)
        ce = np.ascontiguousarray(np.clip(c_edge.ravel() - slack, NEG_CLIP, None))
    else:
        sa = sb = ta = tb = np.zeros(0, np.int64)
        ce = np.zeros(0)

    if _exact_budget(n_s, n_t) <= _EXACT_LIMIT:
        node_map, score = _exact_assignment(source, n_t, t_edge_index,
                                            c_node, c_edge, slack)
        m = np.zeros((n_s + 1, n_t + 1))
        for a, i in enumerate(node_map):
            m[a, n_t if i is None else i] = 1.0
    else:
        shifted = np.ascontiguousarray(np.clip(c_node - slack, NEG_CLIP, None))
        m = _anneal(shifted, sa, sb, ta, tb, ce, 0.0, schedule)
        node_map, score = _refine(_discretize(m, n_s, n_t), source, n_t,
                                  t_edge_index, c_node, c_edge, slack)
        # Second deterministic start: greedy on the static node
        # compatibilities, insurance against a poor anneal basin.
        static = np.hstack([shifted, np.zeros((n_s, 1))])
        alt_map, alt_score = _refine(_discretize(static, n_s, n_t), source,
                                     n_t, t_edge_index, c_node, c_edge, slack)
        if alt_score > score + 1e-12:
            node_map, score = alt_map, alt_score
    edge_map = _derive_edge_map(node_map, source, t_edge_index)
    morphism = Morphism(tuple(node_map), tuple(edge_map))
    validate_morphism(morphism, source, target)
    return morphism, m, float(score)


def likelihood_compatibility(model):
    """Compatibility of outcome elements with model elements (log-likelihoods).

    Node score: ln p(occurrence) + Gaussian log-density of the attribute.
    Edge score: the same with the endpoint-conditional edge probability.
    Per-law covariance inverses and normalizers are factored once here, so
    repeated matches against the same model skip the linear algebra.
    """
    p_min = model.p_min

    def law_cache(laws):
        consts, means, invs = [], [], []
        for law in laws:
            p = min(max(law.p_occur, p_min), 1.0 - p_min)
            d = law.mean.shape[0]
            sign, logdet = np.linalg.slogdet(law.cov) if d else (1.0, 0.0)
            if d and sign <= 0:
                raise np.linalg.LinAlgError("covariance not positive definite")
            consts.append(math.log(p) - 0.5 * (d * math.log(2 * math.pi) + logdet))
            means.append(law.mean)
            invs.append(np.linalg.inv(law.cov) if d else np.zeros((0, 0)))
        return consts, means, invs

    node_cache = law_cache(model.node_laws)
    edge_cache = law_cache(model.edge_laws)

    def scores(attrs, cache, n_laws):
        consts, means, invs = cache
        out = np.empty((attrs.shape[0], n_laws))
        for j in range(n_laws):
            diff = attrs - means[j]
            out[:, j] = consts[j] - 0.5 * np.einsum(
                "nd,de,ne->n", diff, invs[j], diff)
        return out

    def build(source, target):
        if target is not model:
            raise MatchError("compatibility was built for a different target model")
        node = scores(source.node_attrs, node_cache, model.n_nodes)
        if source.n_edges:
            edge = scores(source.edge_attrs, edge_cache, len(model.edge_laws))
        else:
            edge = np.empty((0, len(model.edge_laws)))
        return Compatibility(node, edge, slack=float(np.log(model.epsilon_outlier)))

    return build


def attribute_compatibility(bandwidth: float = 1.0, slack: float = DEFAULT_SLACK):
    """Gaussian-kernel attribute compatibility for graph-to-graph matching."""
    inv = 0.5 / (bandwidth * bandwidth)

    def build(source, target):
        def sqdist(a, b):
            if a.shape[0] == 0 or b.shape[0] == 0:
                return np.zeros((a.shape[0], b.shape[0]))
            diff = a[:, None, :] - b[None, :, :]
            return np.sum(diff * diff, axis=2)

        node = -inv * sqdist(source.node_attrs, target.node_attrs)
        edge = -inv * sqdist(source.edge_attrs, target.edge_attrs)
        return Compatibility(node, edge, slack=slack)

    return build
