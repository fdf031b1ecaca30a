"""GCN clustering model and the decomposable modularity loss."""
from __future__ import annotations

import math
import weakref
from dataclasses import dataclass

import numpy as np
import torch

from . import autodiff as ad
from .autodiff import DTYPE, ParamSet
from .graph import Graph

_TORCH_CACHE: "weakref.WeakKeyDictionary[Graph, dict]" = weakref.WeakKeyDictionary()


def graph_tensors(graph: Graph) -> dict:
    """torch views of a graph, cached per Graph instance."""
    cached = _TORCH_CACHE.get(graph)
    if cached is None:
        a = graph.normalized_adjacency.tocoo()
        idx = torch.tensor(np.vstack([a.row, a.col]), dtype=torch.long)
        a_norm = torch.sparse_coo_tensor(
            idx, torch.tensor(a.data, dtype=DTYPE), a.shape, check_invariants=True
        ).coalesce()
        cached = {
            "a_norm": a_norm,
            "degrees": torch.tensor(graph.degrees, dtype=DTYPE),
            "two_m": float(2 * graph.n_edges),
            "edges": torch.tensor(graph.edges, dtype=torch.long),
        }
        _TORCH_CACHE[graph] = cached
    return cached


def adjacency_rows(graph: Graph, rows) -> torch.Tensor:
    return torch.tensor(graph.adjacency[np.asarray(rows)].toarray(), dtype=DTYPE)


def as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=DTYPE)


# ----------------------------------------------------------------------- model


def init_cluster_params(n_features: int, n_clusters: int, hidden: int = 64, seed: int = 0) -> ParamSet:
    """Uniform fan-in initialisation of GCN and head weights; zero head bias."""
    gen = torch.Generator().manual_seed(seed)

    def uniform(fan_in, shape):
        bound = math.sqrt(6.0 / fan_in) / 2
        return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound

    return ParamSet(
        {
            "gcn_w1": uniform(n_features, (n_features, hidden)),
            "gcn_w2": uniform(n_features, (n_features, hidden)),
            "head_w": uniform(hidden, (hidden, n_clusters)),
            "head_b": torch.zeros(n_clusters, dtype=DTYPE),
        }
    )


def gcn_layer(graph: Graph, h_in, w1, w2) -> torch.Tensor:
    """SELU(D^-1/2 A D^-1/2 H W1 + H W2)."""
    h_in, w1, w2 = as_tensor(h_in), as_tensor(w1), as_tensor(w2)
    if h_in.shape[0] != graph.n_nodes:
        raise ValueError(f"H has {h_in.shape[0]} rows, graph has {graph.n_nodes} nodes")
    if w1.shape != w2.shape or h_in.shape[1] != w1.shape[0]:
        raise ValueError(f"shape mismatch: H {tuple(h_in.shape)}, W1 {tuple(w1.shape)}, W2 {tuple(w2.shape)}")
    prop = ad.spmm(graph_tensors(graph)["a_norm"], ad.matmul(h_in, w1))
    return ad.selu(ad.add(prop, ad.matmul(h_in, w2)))


def assign(graph: Graph, x, n_clusters: int, w: ParamSet) -> torch.Tensor:
    """Soft assignment P = Softmax(MLP(GNN(A, X))), shape N x K."""
    x = as_tensor(x)
    if w["head_w"].shape[1] != n_clusters:
        raise ValueError(f"head produces {w['head_w'].shape[1]} clusters, expected {n_clusters}")
    h = gcn_layer(graph, x, w["gcn_w1"], w["gcn_w2"])
    logits = ad.add(ad.matmul(h, w["head_w"]), w["head_b"])
    return ad.row_softmax(logits)


# ------------------------------------------------------------------------ loss


SELF_PAIR_MODES = ("constant", "literal")


@dataclass
class PairLossTerms:
    rows: np.ndarray
    coef: torch.Tensor  # c_ij for i in rows, all j
    values: torch.Tensor  # L_ij = c_ij * (P_i . P_j), self pairs per mode


def loss_coefficients(graph: Graph, rows) -> torch.Tensor:
    """c_ij = -(A_ij - d_i d_j / 2|E|) / 2|E| for the given rows; zero on edgeless graphs."""
    rows = np.asarray(rows)
    gt = graph_tensors(graph)
    two_m = gt["two_m"]
    if two_m == 0:
        return torch.zeros((len(rows), graph.n_nodes), dtype=DTYPE)
    deg = gt["degrees"]
    null = torch.outer(deg[torch.as_tensor(rows, dtype=torch.long)], deg) / two_m
    return -(adjacency_rows(graph, rows) - null) / two_m


def pair_loss_terms(p: torch.Tensor, graph: Graph, rows, self_pairs: str = "constant") -> PairLossTerms:
    """Per-pair negated-modularity terms for ``rows`` against every node.

    With ``self_pairs="constant"`` the i == j term is c_ii, the value
    P_i.P_i takes on any hard assignment; this keeps the loss equal to its
    expectation over sampled hard assignments. ``"literal"`` keeps
    c_ii * |P_i|^2, which breaks that property on soft rows.
    """
    if self_pairs not in SELF_PAIR_MODES:
        raise ValueError(f"unknown self_pairs mode {self_pairs!r}")
    rows = np.asarray(rows, dtype=np.int64)
    coef = loss_coefficients(graph, rows)
    dots = ad.matmul(ad.gather_rows(p, rows), p.T)
    if self_pairs == "constant":
        diag = torch.zeros_like(coef)
        diag[torch.arange(len(rows)), torch.as_tensor(rows)] = 1.0
        dots = dots * (1.0 - diag) + diag
    return PairLossTerms(rows, coef, ad.mul(coef, dots))


def collapse_reg(p: torch.Tensor, n_clusters: int) -> torch.Tensor:
    """(sqrt(K)/N) * ||sum_i P_i|| - 1."""
    n = p.shape[0]
    return math.sqrt(n_clusters) / n * ad.frobenius(p.sum(dim=0)) - 1.0


def weighted_node_loss(terms: PairLossTerms, v_rows, lam: float, reg, n_nodes: int | None = None) -> torch.Tensor:
    """sum over batch rows i of [sum_j V_ij L_ij + (lam/N) R]."""
    v_rows = as_tensor(v_rows)
    if bool((v_rows.detach() <= 0).any()):
        raise ValueError("pair weights must be strictly positive")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    n = terms.values.shape[1] if n_nodes is None else n_nodes
    weighted = ad.total(ad.mul(v_rows, terms.values))
    return weighted + len(terms.rows) * lam / n * reg


def unweighted_node_loss(terms: PairLossTerms) -> torch.Tensor:
    return ad.total(terms.values)


def soft_modularity(p: torch.Tensor, graph: Graph) -> torch.Tensor:
    """Negated full loss over all rows, computed without N x N storage.

    Equals Newman modularity on one-hot P.
    """
    gt = graph_tensors(graph)
    two_m = gt["two_m"]
    if two_m == 0:
        return torch.zeros((), dtype=DTYPE)
    e, deg = gt["edges"], gt["degrees"]
    within = 2.0 * (p[e[:, 0]] * p[e[:, 1]]).sum()
    pooled = deg @ p
    off_diag_null = pooled @ pooled - (deg**2 * (p * p).sum(dim=1)).sum()
    self_null = (deg**2).sum()
    return (within - (off_diag_null + self_null) / two_m) / two_m
