"""Alternating meta-model / clustering-model training with early stopping."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from .autodiff import ParamSet
from .cluster_model import (
    as_tensor,
    assign,
    collapse_reg,
    init_cluster_params,
    pair_loss_terms,
    soft_modularity,
    unweighted_node_loss,
    weighted_node_loss,
)
from .graph import Dataset, PairSimilarity, adamic_adar
from .meta_model import ablation_features, init_meta_params, meta_forward

VARIANTS = ("metagc", "metagc_x", "metagc_a")
LR_GRID = (5e-4, 1e-3, 2e-3, 3e-3, 4e-3, 5e-3)
BATCH_GRID = (128, 256, 512, 1024, 2048)
CHECKPOINT_FORMAT = "metaclust-checkpoint"
CHECKPOINT_VERSION = 1

Hook = Callable[[str, dict], None]


class TrainingError(RuntimeError):
    pass


def normalize_variant(name: str) -> str:
    v = name.strip().lower().replace("-", "_")
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of metagc, metagc-x, metagc-a")
    return v


@dataclass(frozen=True)
class TrainConfig:
    n_clusters: int
    max_epochs: int = 1500
    min_epochs: int = 200
    batch_size: int = 256
    lr_cluster: float = 1e-3
    lr_meta: float = 1e-3
    lam: float = 1.0
    patience: int = 50
    seed: int = 0
    variant: str = "metagc"
    hidden: int = 64
    meta_hidden: int = 64
    z_dim: int = 64
    optimizer: str = "adam"
    # "edge_count" multiplies the loss pair feature by 2|E| so it is O(1); "raw" feeds it unscaled
    loss_feature_scale: str = "edge_count"

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))

    def validate(self, n_nodes: int) -> None:
        if self.n_clusters < 2 or self.n_clusters > n_nodes:
            raise ValueError(f"need 2 <= K <= N, got K={self.n_clusters}, N={n_nodes}")
        if self.batch_size < 1 or 2 * self.batch_size > n_nodes:
            raise ValueError(f"two disjoint batches of {self.batch_size} do not fit in {n_nodes} nodes")
        if self.lr_cluster <= 0 or self.lr_meta <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.min_epochs > self.max_epochs:
            raise ValueError("min_epochs exceeds max_epochs")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_feature_scale not in ("edge_count", "raw"):
            raise ValueError(f"unknown loss_feature_scale {self.loss_feature_scale!r}")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Problem:
    """Everything a training run reads but never mutates."""

    dataset: Dataset
    x: torch.Tensor
    similarity: PairSimilarity | None
    config: TrainConfig

    @classmethod
    def build(cls, dataset: Dataset, config: TrainConfig) -> "Problem":
        sim = adamic_adar(dataset.graph) if config.variant == "metagc" and dataset.graph.n_edges else None
        return cls(dataset, as_tensor(dataset.attributes), sim, config)

    @property
    def graph(self):
        return self.dataset.graph

    @property
    def n_nodes(self) -> int:
        return self.dataset.graph.n_nodes


@dataclass
class TrainState:
    w: ParamSet
    theta: ParamSet
    opt_w: torch.optim.Optimizer
    opt_theta: torch.optim.Optimizer
    steps: int = 0


def _make_optimizer(params: ParamSet, lr: float, kind: str) -> torch.optim.Optimizer:
    tensors = list(params.values())
    if kind == "sgd":
        return torch.optim.SGD(tensors, lr=lr)
    return torch.optim.Adam(tensors, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def init_state(problem: Problem) -> TrainState:
    cfg = problem.config
    f = problem.x.shape[1]
    w = init_cluster_params(f, cfg.n_clusters, cfg.hidden, seed=cfg.seed).leaves()
    theta = init_meta_params(f, cfg.meta_hidden, cfg.z_dim, seed=cfg.seed + 1).leaves()
    return TrainState(
        w, theta,
        _make_optimizer(w, cfg.lr_cluster, cfg.optimizer),
        _make_optimizer(theta, cfg.lr_meta, cfg.optimizer),
    )


# ------------------------------------------------------------------- objectives


def pair_weights(problem: Problem, p: torch.Tensor, terms, theta: ParamSet) -> torch.Tensor:
    """V for the rows of ``terms``; all ones for the meta-free variant."""
    cfg = problem.config
    if cfg.variant == "metagc_x":
        return torch.ones_like(terms.values)
    feature_variant = "full" if cfg.variant == "metagc" else "attributes_only"
    scale = 2.0 * problem.graph.n_edges if cfg.loss_feature_scale == "edge_count" else 1.0
    feats = ablation_features(feature_variant, problem.graph, problem.similarity, terms, terms.rows, scale)
    return meta_forward(problem.x, feats, theta)


def weighted_batch_loss(problem: Problem, w: ParamSet, theta: ParamSet, rows) -> torch.Tensor:
    cfg = problem.config
    p = assign(problem.graph, problem.x, cfg.n_clusters, w)
    terms = pair_loss_terms(p, problem.graph, rows)
    v = pair_weights(problem, p, terms, theta)
    return weighted_node_loss(terms, v, cfg.lam, collapse_reg(p, cfg.n_clusters))


def unweighted_batch_loss(problem: Problem, w: ParamSet, rows) -> torch.Tensor:
    p = assign(problem.graph, problem.x, problem.config.n_clusters, w)
    return unweighted_node_loss(pair_loss_terms(p, problem.graph, rows))


# ------------------------------------------------------------------------ steps


def sample_disjoint_batches(n: int, b: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two disjoint uniformly random node subsets of size b."""
    if b < 1 or 2 * b > n:
        raise ValueError(f"cannot draw two disjoint batches of {b} from {n} nodes")
    perm = rng.permutation(n)
    return np.sort(perm[:b]), np.sort(perm[b : 2 * b])


def _apply(opt: torch.optim.Optimizer, params: ParamSet, grads: ParamSet) -> None:
    for k, v in params.items():
        v.grad = grads[k].clone()
    opt.step()
    opt.zero_grad(set_to_none=True)


def train_step(state: TrainState, problem: Problem, rng: np.random.Generator, hook: Hook | None = None) -> TrainState:
    """One iteration: meta update through a virtual SGD step, then the clustering update."""
    cfg = problem.config
    b_c, b_m = sample_disjoint_batches(problem.n_nodes, cfg.batch_size, rng)

    if cfg.variant != "metagc_x":
        theta_before = state.theta.flatten()
        g_theta = ad.meta_grad(
            lambda w, th: weighted_batch_loss(problem, w, th, b_c),
            lambda w: unweighted_batch_loss(problem, w, b_m),
            state.w, state.theta, cfg.lr_cluster,
        )
        if not g_theta.all_finite():
            raise TrainingError(f"non-finite meta-gradient at step {state.steps}")
        _apply(state.opt_theta, state.theta, g_theta)
        if hook:
            hook("meta_update", {
                "w": state.w.flatten(), "theta_before": theta_before,
                "theta_after": state.theta.flatten(), "batch_c": b_c, "batch_m": b_m,
            })

    theta_now = state.theta.detached()
    w_before = state.w.flatten()
    try:
        loss, g_w = ad.value_and_grad(lambda w: weighted_batch_loss(problem, w, theta_now, b_c), state.w)
    except ad.NonFiniteError as exc:
        raise TrainingError(f"step {state.steps}: {exc}") from exc
    _apply(state.opt_w, state.w, g_w)
    if hook:
        hook("cluster_update", {
            "theta": theta_now.flatten(), "w_before": w_before,
            "w_after": state.w.flatten(), "loss": loss, "batch_c": b_c,
        })
    state.steps += 1
    return state


# ------------------------------------------------------------------------ train


@dataclass
class TrainReport:
    config: TrainConfig
    loss_trace: list[float]
    modularity_trace: list[float]
    best_epoch: int
    best_modularity: float
    best_w: ParamSet
    best_theta: ParamSet
    epochs_run: int
    wall_ms: float
    soft_assignment: np.ndarray = field(repr=False, default=None)
    edge_weights: np.ndarray | None = field(repr=False, default=None)


def evaluate_modularity(problem: Problem, w: ParamSet) -> tuple[float, np.ndarray]:
    with torch.no_grad():
        p = assign(problem.graph, problem.x, problem.config.n_clusters, w)
        return float(soft_modularity(p, problem.graph)), p.numpy().copy()


def edge_weights(problem: Problem, w: ParamSet, theta: ParamSet, chunk: int = 256) -> np.ndarray | None:
    """Learned V_ij for every edge (i < j) of the training graph."""
    if problem.config.variant == "metagc_x":
        return None
    graph = problem.graph
    out = np.empty(graph.n_edges)
    src, dst = graph.edges[:, 0], graph.edges[:, 1]
    with torch.no_grad():
        p = assign(graph, problem.x, problem.config.n_clusters, w)
        for start in range(0, graph.n_nodes, chunk):
            rows = np.arange(start, min(start + chunk, graph.n_nodes))
            sel = (src >= rows[0]) & (src <= rows[-1])
            if not sel.any():
                continue
            terms = pair_loss_terms(p, graph, rows)
            v = pair_weights(problem, p, terms, theta).numpy()
            out[sel] = v[src[sel] - rows[0], dst[sel]]
    return out


def train(dataset: Dataset, config: TrainConfig, hook: Hook | None = None) -> TrainReport:
    """Run epochs of floor(N/b) steps, keep the parameters with the best soft modularity."""
    config.validate(dataset.graph.n_nodes)
    started = time.perf_counter()
    problem = Problem.build(dataset, config)
    state = init_state(problem)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = problem.n_nodes // config.batch_size

    loss_trace, mod_trace = [], []
    best = (-math.inf, 0, state.w.detached(), state.theta.detached())
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        recorder = _loss_recorder(losses, hook)
        for _ in range(steps_per_epoch):
            train_step(state, problem, rng, hook=recorder)
        mod, _ = evaluate_modularity(problem, state.w)
        if not math.isfinite(mod):
            raise TrainingError(f"epoch {epoch}: modularity is not finite")
        loss_trace.append(float(np.mean(losses)))
        mod_trace.append(mod)
        if mod > best[0]:
            best = (mod, epoch, state.w.detached(), state.theta.detached())
        if epoch >= config.min_epochs and epoch - best[1] >= config.patience:
            break

    best_mod, best_epoch, best_w, best_theta = best
    _, p = evaluate_modularity(problem, best_w)
    weights = edge_weights(problem, best_w, best_theta)
    wall_ms = (time.perf_counter() - started) * 1000.0
    return TrainReport(
        config, loss_trace, mod_trace, best_epoch, best_mod, best_w, best_theta,
        len(mod_trace), wall_ms, p, weights,
    )


def _loss_recorder(sink: list, hook: Hook | None) -> Hook:
    def record(event, payload):
        if event == "cluster_update":
            sink.append(payload["loss"])
        if hook:
            hook(event, payload)

    return record


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(report: TrainReport, path) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(report.config),
        "config_hash": report.config.config_hash(),
        "best_epoch": report.best_epoch,
        "best_modularity": report.best_modularity,
        "w": report.best_w.to_json(),
        "theta": report.best_theta.to_json(),
    }
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path) -> tuple[TrainConfig, ParamSet, ParamSet]:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    config = TrainConfig(**blob["config"])
    if config.config_hash() != blob["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch")
    return config, ParamSet.from_json(blob["w"]), ParamSet.from_json(blob["theta"])
