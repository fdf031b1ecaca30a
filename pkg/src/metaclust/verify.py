"""Self-check suite: expectation-conformity, oracle agreement, gradient checks."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from .autodiff import DTYPE, ParamSet
from .cluster_model import (
    assign,
    collapse_reg,
    graph_tensors,
    init_cluster_params,
    pair_loss_terms,
    unweighted_node_loss,
    weighted_node_loss,
)
from .evaluation import (
    assignment_probability,
    enumerate_assignments,
    expectation_conforming_gap,
    relaxed_support_check,
    modularity_loss,
    modularity_metric,
    normalized_cut,
    one_hot,
)
from .graph import Graph

LossFn = Callable[[np.ndarray, Graph], float]

GAP_TOL = 1e-9
NC_MIN_GAP = 1e-3
GRAD_TOL = 1e-4
META_GRAD_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class VerifyReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.detail}  ({r.seconds:.2f}s)"
            for r in self.results
        ]


def random_graph(n: int, rng: np.random.Generator, p: float | None = None) -> Graph:
    """Erdos-Renyi graph on n nodes with at least one edge."""
    p = rng.uniform(0.3, 0.9) if p is None else p
    while True:
        iu = np.triu_indices(n, 1)
        keep = rng.random(len(iu[0])) < p
        if keep.any():
            return Graph.from_pairs(n, np.column_stack([iu[0][keep], iu[1][keep]]))


def random_soft(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(k), size=n)


# ------------------------------------------------------------------- checks


def check_decomposable_conforming(
    trials: int, rng: np.random.Generator, loss_fn: LossFn = modularity_loss
) -> CheckResult:
    """Gap <= 1e-9 on random graphs, and loss at one-hot P equals negated modularity.

    The second condition pins the sign, so a flipped loss cannot pass by
    being conforming with the wrong orientation.
    """
    worst_gap, worst_sign = 0.0, 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 6))
        k = int(rng.integers(2, 4))
        g = random_graph(n, rng)
        worst_gap = max(worst_gap, expectation_conforming_gap(loss_fn, random_soft(n, k, rng), g))
        a = rng.integers(0, k, size=n)
        worst_sign = max(worst_sign, abs(loss_fn(one_hot(a, k), g) + modularity_metric(a, g)))
    ok = worst_gap <= GAP_TOL and worst_sign <= GAP_TOL
    return CheckResult("modularity loss conforming", ok, f"max gap {worst_gap:.2e}, max sign mismatch {worst_sign:.2e}")


def check_generic_decomposable(trials: int, rng: np.random.Generator) -> CheckResult:
    """Any symmetric constant matrix c gives an expectation-conforming sum."""
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 6))
        k = int(rng.integers(2, 4))
        c = rng.normal(size=(n, n))
        c = (c + c.T) / 2

        def f(p, _g, c=c):
            gram = np.asarray(p) @ np.asarray(p).T
            np.fill_diagonal(gram, 1.0)
            return float(np.sum(c * gram))

        worst = max(worst, expectation_conforming_gap(f, random_soft(n, k, rng), Graph.from_pairs(n, [])))
    return CheckResult("decomposable => conforming", worst <= GAP_TOL, f"max gap {worst:.2e}")


def normalized_cut_counterexample() -> dict:
    """2-node, 1-edge graph with the all-halves assignment."""
    g = Graph.from_pairs(2, [(0, 1)])
    p = np.full((2, 2), 0.5)
    p1p2 = float(p[0] @ p[1])
    expected = sum(
        assignment_probability(p, a) * normalized_cut(one_hot(a, 2), g) for a in enumerate_assignments(2, 2)
    )
    return {
        "direct": normalized_cut(p, g),
        "expected": expected,
        "closed_direct": -2 * p1p2 / (p[0] @ p[0] + p[1] @ p[1]),
        "closed_expected": -p1p2,
        "gap": expectation_conforming_gap(normalized_cut, p, g),
    }


def check_normalized_cut() -> CheckResult:
    r = normalized_cut_counterexample()
    ok = (
        r["gap"] > NC_MIN_GAP
        and abs(r["direct"] - r["closed_direct"]) <= 1e-12
        and abs(r["expected"] - r["closed_expected"]) <= 1e-12
    )
    return CheckResult(
        "normalized cut not conforming", ok,
        f"direct {r['direct']:.4f}, expected {r['expected']:.4f}, gap {r['gap']:.4f}",
    )


def check_relaxed_support(trials: int, rng: np.random.Generator) -> CheckResult:
    failures = 0
    for _ in range(trials):
        n = int(rng.integers(3, 5))
        res = relaxed_support_check(random_graph(n, rng), 2, rng)
        failures += not (res["values_match"] and res["support_optimal"])
    return CheckResult("relaxed optimum support", failures == 0, f"{trials - failures}/{trials} graphs")


def _gcn_instance(rng: np.random.Generator):
    n = int(rng.integers(4, 7))
    f, k = 3, 2
    g = random_graph(n, rng, p=0.5)
    x = torch.tensor(rng.uniform(-1, 1, size=(n, f)), dtype=DTYPE)
    w = init_cluster_params(f, k, hidden=3, seed=int(rng.integers(1 << 30)))
    w = w.map(lambda t: t + torch.tensor(rng.uniform(-0.3, 0.3, size=tuple(t.shape)), dtype=DTYPE))
    return g, x, k, w


def check_grad(trials: int, rng: np.random.Generator) -> CheckResult:
    """Weighted clustering loss gradient vs central differences."""
    worst = 0.0
    for _ in range(trials):
        g, x, k, w = _gcn_instance(rng)
        rows = np.arange(g.n_nodes)
        v = torch.tensor(rng.uniform(0.1, 1.0, size=(g.n_nodes, g.n_nodes)), dtype=DTYPE)

        def loss(params, g=g, x=x, k=k, v=v, rows=rows):
            p = assign(g, x, k, params)
            return weighted_node_loss(pair_loss_terms(p, g, rows), v, 1.0, collapse_reg(p, k))

        worst = max(worst, ad.finite_diff_check(loss, w, epsilon=1e-5, floor=1e-6))
    return CheckResult("grad vs finite differences", worst <= GRAD_TOL, f"max rel err {worst:.2e}")


def check_meta_grad(trials: int, rng: np.random.Generator) -> CheckResult:
    """Meta-gradient through one SGD step on a toy bilevel pair (w, theta <= 20 scalars each)."""
    worst = 0.0
    for _ in range(trials):
        n, f = 5, 2
        g = random_graph(n, rng, p=0.6)
        x = torch.tensor(rng.uniform(-1, 1, size=(n, f)), dtype=DTYPE)
        w = ParamSet({"a": rng.uniform(-1, 1, size=(f, 2)), "b": rng.uniform(-0.5, 0.5, size=2)})
        theta = ParamSet({"u": rng.uniform(-1, 1, size=(f, 3)), "s": rng.uniform(-0.5, 0.5, size=3)})
        rows_c, rows_m = np.array([0, 1, 2]), np.array([3, 4])

        def soft(params, g=g, x=x):
            return ad.row_softmax(ad.add(ad.spmm(graph_tensors(g)["a_norm"], ad.matmul(x, params["a"])), params["b"]))

        def inner(wp, th, g=g, x=x):
            p = soft(wp)
            z = ad.add(ad.matmul(x, th["u"]), th["s"])
            v = ad.sigmoid(ad.matmul(ad.gather_rows(z, rows_c), z.T))
            return weighted_node_loss(pair_loss_terms(p, g, rows_c), v, 0.5, collapse_reg(p, 2))

        def outer(wp, g=g):
            return unweighted_node_loss(pair_loss_terms(soft(wp), g, rows_m))

        eta = float(rng.uniform(0.5, 2.0))
        worst = max(worst, ad.meta_finite_diff_check(inner, outer, w, theta, eta, epsilon=1e-5))
    return CheckResult("meta_grad vs finite diffs", worst <= META_GRAD_TOL, f"max rel err {worst:.2e}")


# ---------------------------------------------------------------------- suite


def run_suite(
    seed: int = 0,
    trials: int = 100,
    grad_trials: int = 20,
    loss_fn: LossFn = modularity_loss,
) -> VerifyReport:
    if trials < 1 or grad_trials < 1:
        raise ValueError("trials must be a positive integer")
    rng = np.random.default_rng(seed)
    steps = [
        lambda: check_decomposable_conforming(trials, rng, loss_fn),
        lambda: check_generic_decomposable(trials, rng),
        check_normalized_cut,
        lambda: check_relaxed_support(min(trials, 10), rng),
        lambda: check_grad(grad_trials, rng),
        lambda: check_meta_grad(grad_trials, rng),
    ]
    report = VerifyReport()
    for step in steps:
        t0 = time.perf_counter()
        result = step()
        result.seconds = time.perf_counter() - t0
        report.results.append(result)
    return report


def flipped_modularity_loss(p, graph: Graph) -> float:
    """Deliberately mis-signed loss for mutation testing of the suite."""
    return -modularity_loss(p, graph)

