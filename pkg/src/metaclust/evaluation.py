"""Clustering metrics, edge-ranking metrics, and brute-force enumeration oracles."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy.optimize import minimize

from .graph import Graph

ENUMERATION_LIMIT = 10**7


class EnumerationTooLarge(ValueError):
    pass


def to_deterministic(p) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest cluster index."""
    return np.argmax(np.asarray(p), axis=1).astype(np.int64)


def one_hot(assignment, n_clusters: int) -> np.ndarray:
    return np.eye(n_clusters)[np.asarray(assignment, dtype=np.int64)]


def modularity_metric(assignment, graph: Graph) -> float:
    """Newman modularity sum_c [m_c/|E| - (D_c/2|E|)^2] of a hard assignment."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if len(assignment) != graph.n_nodes:
        raise ValueError("assignment must cover every node")
    m = graph.n_edges
    if m == 0:
        return 0.0
    e = graph.edges
    inside = assignment[e[:, 0]] == assignment[e[:, 1]]
    k = int(assignment.max()) + 1 if len(assignment) else 0
    within = np.bincount(assignment[e[inside, 0]], minlength=k).astype(np.float64)
    vol = np.bincount(assignment, weights=graph.degrees.astype(np.float64), minlength=k)
    return float(np.sum(within / m - (vol / (2 * m)) ** 2))


def _contingency(labels, assignment) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    assignment = np.asarray(assignment, dtype=np.int64)
    if labels.shape != assignment.shape:
        raise ValueError("labels and assignment must cover the same nodes")
    _, li = np.unique(labels, return_inverse=True)
    _, ci = np.unique(assignment, return_inverse=True)
    table = np.zeros((li.max() + 1, ci.max() + 1), dtype=np.int64)
    np.add.at(table, (li, ci), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels, assignment) -> float:
    """I(L;C)/sqrt(H(L)H(C)) in nats; 0 if either side has zero entropy unless identical."""
    table = _contingency(labels, assignment)
    n = table.sum()
    h_l, h_c = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if h_l == 0 or h_c == 0:
        return 1.0 if table.shape == (1, 1) else 0.0
    joint = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / n**2
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())
    return max(0.0, min(1.0, mi / math.sqrt(h_l * h_c)))


def _pairs(x):
    return x * (x - 1) // 2


def pairwise_f1(labels, assignment) -> float:
    table = _contingency(labels, assignment)
    tp = int(_pairs(table).sum())
    same_cluster = int(_pairs(table.sum(axis=0)).sum())
    same_label = int(_pairs(table.sum(axis=1)).sum())
    fp, fn = same_cluster - tp, same_label - tp
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


# --------------------------------------------------------------------- ranking


@dataclass(frozen=True)
class RankingMetrics:
    prauc: float
    hits_at_frac: float
    baseline: float
    tied_weights: bool = False


def precision_recall_points(edge_weights, real_mask) -> tuple[np.ndarray, np.ndarray]:
    """Exact PR curve over descending weights; equal weights keep edge order."""
    w = np.asarray(edge_weights, dtype=np.float64)
    y = np.asarray(real_mask, dtype=bool)
    order = np.argsort(-w, kind="stable")
    tp = np.cumsum(y[order])
    k = np.arange(1, len(y) + 1)
    return tp / k, tp / max(int(y.sum()), 1)


def ranking_metrics(edge_weights, real_mask, frac: float = 0.1) -> RankingMetrics:
    w = np.asarray(edge_weights, dtype=np.float64)
    y = np.asarray(real_mask, dtype=bool)
    if w.shape != y.shape:
        raise ValueError(f"{len(w)} weights but {len(y)} mask entries")
    if not 0 < frac <= 1:
        raise ValueError("frac must lie in (0, 1]")
    if len(y) == 0:
        raise ValueError("no edges to rank")
    precision, recall = precision_recall_points(w, y)
    # precision at recall 0 is taken from the first ranked edge
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[precision[0]], precision])
    prauc = float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2))
    cutoff = max(1, math.ceil(frac * len(y) - 1e-9))
    order = np.argsort(-w, kind="stable")
    hits = float(y[order[:cutoff]].mean())
    return RankingMetrics(prauc, hits, float(y.mean()), bool(len(np.unique(w)) < len(w)))


# ----------------------------------------------------------------- enumeration


def _guard(n: int, k: int) -> None:
    if k**n > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(f"{k}^{n} assignments exceed the limit of {ENUMERATION_LIMIT}")


def enumerate_assignments(n: int, k: int) -> Iterator[np.ndarray]:
    """Every hard assignment of n nodes to k clusters, exactly once."""
    _guard(n, k)
    for combo in itertools.product(range(k), repeat=n):
        yield np.asarray(combo, dtype=np.int64)


def assignment_probability(p: np.ndarray, assignment) -> float:
    """prod_i P[i, S(i)]: chance that row-wise sampling from P yields ``assignment``."""
    p = np.asarray(p)
    return float(np.prod(p[np.arange(len(p)), np.asarray(assignment)]))


def expectation_conforming_gap(loss_fn: Callable[[np.ndarray, Graph], float], p, graph: Graph) -> float:
    """|f(P) - E_{P* ~ P} f(P*)| by full enumeration."""
    p = np.asarray(p, dtype=np.float64)
    n, k = p.shape
    expected = 0.0
    for a in enumerate_assignments(n, k):
        prob = assignment_probability(p, a)
        if prob:
            expected += prob * loss_fn(one_hot(a, k), graph)
    return abs(loss_fn(p, graph) - expected)


def bruteforce_best(fn: Callable[[np.ndarray, Graph], float], graph: Graph, k: int, maximize: bool = True, tol: float = 1e-12):
    """Exact optimum of ``fn(assignment, graph)`` over all hard assignments.

    Returns the best value and every assignment attaining it within ``tol``.
    """
    values, assignments = [], []
    for a in enumerate_assignments(graph.n_nodes, k):
        values.append(fn(a, graph))
        assignments.append(a)
    values = np.asarray(values)
    best = values.max() if maximize else values.min()
    hit = np.abs(values - best) <= tol
    return float(best), [assignments[i] for i in np.flatnonzero(hit)]


# ------------------------------------------------------------- loss functions


def modularity_coefficients(graph: Graph) -> np.ndarray:
    """Dense c_ij = -(A_ij - d_i d_j/2|E|)/2|E| (zero matrix without edges)."""
    n, m2 = graph.n_nodes, 2.0 * graph.n_edges
    if m2 == 0:
        return np.zeros((n, n))
    a = graph.adjacency.toarray()
    d = graph.degrees.astype(np.float64)
    return -(a - np.outer(d, d) / m2) / m2


def decomposable_value(coef: np.ndarray, p: np.ndarray, self_pairs: str = "constant") -> float:
    """sum_ij c_ij P_i.P_j with self-pair handling.

    ``constant`` scores each i == j term as c_ii, its value under every hard
    assignment; ``literal`` uses c_ii * |P_i|^2, which is not
    expectation-conforming on soft rows.
    """
    p = np.asarray(p, dtype=np.float64)
    gram = p @ p.T
    if self_pairs == "constant":
        np.fill_diagonal(gram, 1.0)
    elif self_pairs != "literal":
        raise ValueError(f"unknown self_pairs mode {self_pairs!r}")
    return float(np.sum(coef * gram))


def modularity_loss(p, graph: Graph, self_pairs: str = "constant") -> float:
    return decomposable_value(modularity_coefficients(graph), p, self_pairs)


def normalized_cut(p, graph: Graph) -> float:
    """-Tr(P^T A P) / Tr(P^T D P)."""
    p = np.asarray(p, dtype=np.float64)
    a = graph.adjacency.toarray()
    d = graph.degrees.astype(np.float64)
    num = np.trace(p.T @ a @ p)
    den = np.sum(d[:, None] * p * p)
    return float(-num / den)


def relaxed_minimum(loss_fn, graph: Graph, k: int, rng: np.random.Generator, restarts: int = 20):
    """Minimise ``loss_fn`` over row-stochastic P with SLSQP from random starts."""
    n = graph.n_nodes
    cons = [{"type": "eq", "fun": (lambda x, i=i: x.reshape(n, k)[i].sum() - 1.0)} for i in range(n)]
    best = None
    for _ in range(restarts):
        x0 = rng.dirichlet(np.ones(k), size=n).ravel()
        res = minimize(
            lambda x: loss_fn(x.reshape(n, k), graph), x0, method="SLSQP",
            bounds=[(0.0, 1.0)] * (n * k), constraints=cons,
            options={"ftol": 1e-14, "maxiter": 500},
        )
        p = np.clip(res.x.reshape(n, k), 0.0, 1.0)
        p /= p.sum(axis=1, keepdims=True)
        val = loss_fn(p, graph)
        if best is None or val < best[0]:
            best = (val, p)
    return best


def relaxed_support_check(graph: Graph, k: int, rng: np.random.Generator, support_tol: float = 1e-6, value_tol: float = 1e-7) -> dict:
    """Relaxed optimum equals the hard optimum and its support holds only hard optima."""
    hard_best, _ = bruteforce_best(lambda a, g: modularity_loss(one_hot(a, k), g), graph, k, maximize=False)
    soft_val, p = relaxed_minimum(modularity_loss, graph, k, rng)
    support_ok = True
    for a in enumerate_assignments(graph.n_nodes, k):
        if assignment_probability(p, a) > support_tol:
            if modularity_loss(one_hot(a, k), graph) > hard_best + value_tol:
                support_ok = False
    return {
        "hard_min": hard_best,
        "soft_min": soft_val,
        "values_match": abs(soft_val - hard_best) <= value_tol,
        "support_optimal": support_ok,
    }
