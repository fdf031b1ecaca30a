"""Meta-model producing strictly positive node-pair loss weights."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import autodiff as ad
from .autodiff import DTYPE, ParamSet
from .cluster_model import PairLossTerms, adjacency_rows, as_tensor
from .graph import Graph, PairSimilarity

N_FEATURES = 3
VARIANTS = ("full", "attributes_only")


@dataclass
class PairFeatures:
    rows: np.ndarray
    y: torch.Tensor  # (3, |rows|, N)


def init_meta_params(
    n_features: int, hidden: int = 64, z_dim: int = 64, seed: int = 0, n_pair_features: int = N_FEATURES
) -> ParamSet:
    gen = torch.Generator().manual_seed(seed)

    def uniform(fan_in, shape):
        bound = math.sqrt(6.0 / fan_in) / 2
        return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound

    tensors = {}
    for r in range(n_pair_features):
        tensors[f"mlp{r}_w1"] = uniform(n_features, (n_features, hidden))
        tensors[f"mlp{r}_b1"] = torch.zeros(hidden, dtype=DTYPE)
        tensors[f"mlp{r}_w2"] = uniform(hidden, (hidden, z_dim))
        tensors[f"mlp{r}_b2"] = torch.zeros(z_dim, dtype=DTYPE)
    tensors["feature_logits"] = torch.zeros(n_pair_features, dtype=DTYPE)
    return ParamSet(tensors)


def feature_weights(theta: ParamSet) -> torch.Tensor:
    """alpha = softmax(feature logits); positive and summing to one."""
    return torch.softmax(theta["feature_logits"], dim=0)


def embed(x, theta: ParamSet, r: int) -> torch.Tensor:
    """Z^(r) = second layer(ReLU(first layer(X)))."""
    h = ad.relu(ad.add(ad.matmul(x, theta[f"mlp{r}_w1"]), theta[f"mlp{r}_b1"]))
    return ad.add(ad.matmul(h, theta[f"mlp{r}_w2"]), theta[f"mlp{r}_b2"])


def pair_features(
    graph: Graph, similarity: PairSimilarity, loss_terms: PairLossTerms, rows, loss_scale: float = 1.0
) -> PairFeatures:
    """(1, 0, 0) on non-adjacent pairs, (1, S_ij, loss_scale * L_ij) on edges.

    L enters as a constant: no gradient flows back into the clustering model
    through this feature.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if similarity.graph is not graph and not (
        similarity.graph.n_nodes == graph.n_nodes
        and np.array_equal(similarity.graph.edges, graph.edges)
    ):
        raise ValueError("similarity does not cover the edges of this graph")
    if not np.array_equal(np.asarray(loss_terms.rows), rows):
        raise ValueError("loss terms were computed for different rows")
    adj = adjacency_rows(graph, rows)
    y1 = torch.ones_like(adj)
    y2 = torch.tensor(similarity.matrix[rows].toarray(), dtype=DTYPE)
    y3 = adj * loss_terms.values.detach() * loss_scale
    return PairFeatures(rows, torch.stack([y1, y2, y3]))


def attribute_only_features(n_nodes: int, rows) -> PairFeatures:
    rows = np.asarray(rows, dtype=np.int64)
    y = torch.zeros((N_FEATURES, len(rows), n_nodes), dtype=DTYPE)
    y[0] = 1.0
    return PairFeatures(rows, y)


def ablation_features(variant: str, graph: Graph, similarity, loss_terms, rows, loss_scale: float = 1.0) -> PairFeatures:
    if variant == "full":
        return pair_features(graph, similarity, loss_terms, rows, loss_scale)
    if variant == "attributes_only":
        return attribute_only_features(graph.n_nodes, rows)
    raise ValueError(f"unknown feature variant {variant!r}; expected one of {VARIANTS}")


def meta_forward(x, features: PairFeatures, theta: ParamSet, rows=None) -> torch.Tensor:
    """V_rows = sum_r alpha_r * sigmoid((Z_r Z_r^T)[rows] * Y_r); entries in (0, 1)."""
    x = as_tensor(x)
    rows = features.rows if rows is None else np.asarray(rows, dtype=np.int64)
    if not np.array_equal(rows, features.rows):
        raise ValueError("rows do not match the pair features")
    y = features.y
    if y.shape[2] != x.shape[0]:
        raise ValueError(f"features span {y.shape[2]} nodes, X has {x.shape[0]} rows")
    alpha = feature_weights(theta)
    v = None
    for r in range(y.shape[0]):
        z = embed(x, theta, r)
        att = ad.matmul(ad.gather_rows(z, rows), z.T)
        term = alpha[r] * ad.sigmoid(ad.mul(att, y[r]))
        v = term if v is None else v + term
    return v
