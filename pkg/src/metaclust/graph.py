"""Graph containers, dataset I/O, noise injection, Adamic-Adar and SBM data."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class GraphFormatError(ValueError):
    pass


class NoiseInjectionError(ValueError):
    pass


def _canonical_edges(pairs: np.ndarray) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    order = np.lexsort((hi, lo))
    return np.stack([lo[order], hi[order]], axis=1)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted simple graph.

    ``edges`` holds each edge once as ``(i, j)`` with ``i < j``, sorted
    lexicographically; every per-edge array in this package is aligned with
    that order.
    """

    n_nodes: int
    edges: np.ndarray

    def __post_init__(self):
        e = self.edges
        if e.ndim != 2 or e.shape[1] != 2:
            raise GraphFormatError(f"edges must have shape (E, 2), got {e.shape}")
        if len(e):
            if np.any(e[:, 0] >= e[:, 1]):
                raise GraphFormatError("edges must be canonical (i < j, no self-loops)")
            if e.min() < 0 or e.max() >= self.n_nodes:
                raise GraphFormatError("edge endpoint outside [0, n_nodes)")
            key = e[:, 0] * self.n_nodes + e[:, 1]
            if np.any(np.diff(key) <= 0):
                raise GraphFormatError("edges must be sorted and free of duplicates")
        e.setflags(write=False)

    @classmethod
    def from_pairs(cls, n_nodes: int, pairs) -> "Graph":
        """Build from arbitrary (i, j) pairs; rejects self-loops and duplicates."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            raise GraphFormatError("self-loop in edge list")
        edges = _canonical_edges(pairs)
        if len(edges) > 1:
            key = edges[:, 0] * n_nodes + edges[:, 1]
            if np.any(np.diff(key) == 0):
                raise GraphFormatError("duplicate edge in edge list")
        return cls(int(n_nodes), edges)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.bincount(self.edges.ravel(), minlength=self.n_nodes).astype(np.int64)
        deg.setflags(write=False)
        return deg

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency in CSR form."""
        n = self.n_nodes
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        return sp.csr_matrix(
            (data, (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n)
        )

    @cached_property
    def normalized_adjacency(self) -> sp.csr_matrix:
        """D^{-1/2} A D^{-1/2}; rows of isolated nodes are all zero."""
        deg = self.degrees.astype(np.float64)
        inv_sqrt = np.zeros_like(deg)
        nz = deg > 0
        inv_sqrt[nz] = deg[nz] ** -0.5
        scale = sp.diags(inv_sqrt)
        return (scale @ self.adjacency @ scale).tocsr()

    def has_edge(self, i: int, j: int) -> bool:
        return bool(self.adjacency[i, j])

    def edge_keys(self) -> np.ndarray:
        return self.edges[:, 0] * self.n_nodes + self.edges[:, 1]


@dataclass(frozen=True, eq=False)
class Dataset:
    graph: Graph
    attributes: np.ndarray
    labels: np.ndarray
    node_ids: np.ndarray | None = None  # original id of each dense node index

    def __post_init__(self):
        n = self.graph.n_nodes
        if self.attributes.ndim != 2 or self.attributes.shape[1] < 1:
            raise GraphFormatError("attributes must be a 2-D matrix with at least one column")
        if self.attributes.shape[0] != n or len(self.labels) != n:
            raise GraphFormatError(
                f"row count mismatch: graph has {n} nodes, "
                f"{self.attributes.shape[0]} attribute rows, {len(self.labels)} labels"
            )
        if len(self.labels) and self.labels.min() < 0:
            raise GraphFormatError("labels must be non-negative")

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def with_graph(self, graph: Graph) -> "Dataset":
        return Dataset(graph, self.attributes, self.labels, self.node_ids)


@dataclass(frozen=True, eq=False)
class NoisyGraph:
    graph: Graph
    real_mask: np.ndarray
    clean_graph: Graph

    def __post_init__(self):
        if len(self.real_mask) != self.graph.n_edges:
            raise GraphFormatError("real_mask must have one flag per edge")
        self.real_mask.setflags(write=False)

    @property
    def n_injected(self) -> int:
        return int((~self.real_mask).sum())

    @property
    def injected_edges(self) -> np.ndarray:
        return self.graph.edges[~self.real_mask]


@dataclass(frozen=True, eq=False)
class PairSimilarity:
    """Adamic-Adar scores for the edges of one graph, aligned with ``graph.edges``."""

    graph: Graph
    values: np.ndarray

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        n = self.graph.n_nodes
        i, j = self.graph.edges[:, 0], self.graph.edges[:, 1]
        return sp.csr_matrix(
            (np.concatenate([self.values, self.values]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(n, n),
        )

    def score(self, i: int, j: int) -> float:
        if not self.graph.has_edge(i, j):
            raise KeyError(f"no similarity stored for non-edge ({i}, {j})")
        return float(self.matrix[i, j])


# --------------------------------------------------------------------------- I/O


def _read_edge_lines(path: Path):
    pairs, lines = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) < 2:
                raise GraphFormatError(f"{path}: line {lineno}: expected a node pair, got {text!r}")
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path}: line {lineno}: non-integer node id in {text!r}") from None
            if a == b:
                raise GraphFormatError(f"{path}: self-loop at line {lineno}")
            pairs.append((a, b))
            lines.append((lineno, parts[2:]))
    return pairs, lines


def _read_matrix_csv(path: Path) -> np.ndarray:
    rows = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if rows:
        try:
            [float(x) for x in rows[0].split(",")]
        except ValueError:
            rows = rows[1:]  # header line
    try:
        data = [[float(x) for x in r.split(",")] for r in rows]
    except ValueError as exc:
        raise GraphFormatError(f"{path}: {exc}") from None
    if len({len(r) for r in data}) > 1:
        raise GraphFormatError(f"{path}: rows have differing column counts")
    return np.asarray(data, dtype=np.float64).reshape(len(data), -1)


def _dense_ids(raw: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0 or (raw.min() >= 0 and raw.max() < n):
        return np.arange(n), raw
    node_ids = np.unique(raw)
    if len(node_ids) != n:
        raise GraphFormatError(f"edge list has {len(node_ids)} distinct node ids but {n} attribute/label rows")
    return node_ids, np.searchsorted(node_ids, raw)


def _read_labels(path: Path) -> np.ndarray:
    labels = _read_matrix_csv(path)
    if labels.shape[1] != 1:
        raise GraphFormatError(f"{path}: expected one label per row")
    labels = labels[:, 0]
    if np.any(labels != np.round(labels)):
        raise GraphFormatError(f"{path}: labels must be integers")
    _, dense = np.unique(labels, return_inverse=True)
    return dense.astype(np.int64)


def load_labeled_graph(edge_list_path, labels_path) -> tuple[Graph, np.ndarray, np.ndarray]:
    """Edge list plus labels; returns (graph, labels, original node ids)."""
    edge_path, label_path = Path(edge_list_path), Path(labels_path)
    for p in (edge_path, label_path):
        if not p.is_file():
            raise FileNotFoundError(f"missing input file: {p}")
    pairs, _ = _read_edge_lines(edge_path)
    labels = _read_labels(label_path)
    n = len(labels)
    raw = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    node_ids, mapped = _dense_ids(raw, n)
    canon = _canonical_edges(mapped)
    keep = np.ones(len(canon), dtype=bool)
    if len(canon) > 1:
        keep[1:] = np.any(np.diff(canon, axis=0) != 0, axis=1)
    if not keep.all():
        log.warning("%s: dropped %d repeated edges", edge_path, int((~keep).sum()))
    return Graph(int(n), np.ascontiguousarray(canon[keep])), labels, node_ids


def load_dataset(edge_list_path, attributes_path, labels_path) -> Dataset:
    """Load an edge list plus attribute/label CSVs.

    Node ids already in ``[0, n_rows)`` are used as-is (isolated nodes
    allowed). Otherwise the distinct ids are ranked and mapped onto
    ``[0, n_rows)``, which requires exactly ``n_rows`` distinct ids.
    Repeated edges (either orientation) are dropped with a warning.
    """
    for p in (edge_list_path, attributes_path, labels_path):
        if not Path(p).is_file():
            raise FileNotFoundError(f"missing input file: {p}")
    attributes = _read_matrix_csv(Path(attributes_path))
    n_labels = len(_read_matrix_csv(Path(labels_path)))
    if attributes.shape[0] != n_labels:
        raise GraphFormatError(f"attribute/label row count mismatch: {attributes.shape[0]} vs {n_labels}")
    graph, labels, node_ids = load_labeled_graph(edge_list_path, labels_path)
    return Dataset(graph, attributes, labels, node_ids)


def save_noisy_graph(noisy: NoisyGraph, path) -> None:
    """Write ``i j flag`` lines (flag 1 = real edge) preceded by a node-count header."""
    lines = [f"# n_nodes {noisy.graph.n_nodes}"]
    for (i, j), real in zip(noisy.graph.edges.tolist(), noisy.real_mask.tolist()):
        lines.append(f"{i} {j} {int(real)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_noisy_graph(path, n_nodes: int | None = None) -> NoisyGraph:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing input file: {path}")
    header_n = None
    for ln in path.read_text().splitlines():
        if ln.startswith("# n_nodes"):
            header_n = int(ln.split()[2])
            break
    pairs, extra = _read_edge_lines(path)
    flags = []
    for lineno, rest in extra:
        if not rest or rest[0] not in ("0", "1"):
            raise GraphFormatError(f"{path}: line {lineno}: missing 0/1 real-edge flag")
        flags.append(rest[0] == "1")
    n = n_nodes if n_nodes is not None else header_n
    if n is None:
        raise GraphFormatError(f"{path}: node count unknown (no header and none given)")
    raw = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    lo, hi = np.minimum(raw[:, 0], raw[:, 1]), np.maximum(raw[:, 0], raw[:, 1])
    order = np.lexsort((hi, lo))
    graph = Graph.from_pairs(n, raw)
    mask = np.asarray(flags, dtype=bool)[order]
    clean = Graph(n, np.ascontiguousarray(graph.edges[mask]))
    return NoisyGraph(graph, mask, clean)


# ------------------------------------------------------------------ operations


def noise_edge_count(n_edges: int, ratio: float) -> int:
    # round half up
    return int(np.floor(ratio * n_edges + 0.5))


def inject_noise(dataset: Dataset, ratio: float, rng_seed: int) -> NoisyGraph:
    """Add ``round(ratio * |E|)`` uniformly sampled cross-class non-edges."""
    return inject_noise_labeled(dataset.graph, dataset.labels, ratio, rng_seed)


def inject_noise_labeled(graph: Graph, labels: np.ndarray, ratio: float, rng_seed: int) -> NoisyGraph:
    if ratio < 0:
        raise NoiseInjectionError(f"noise ratio must be non-negative, got {ratio}")
    labels = np.asarray(labels, dtype=np.int64)
    n, m = graph.n_nodes, graph.n_edges
    want = noise_edge_count(m, ratio)
    if want == 0:
        return NoisyGraph(graph, np.ones(m, dtype=bool), graph)

    counts = np.bincount(labels)
    cross_pairs = (n * n - int((counts.astype(np.int64) ** 2).sum())) // 2
    cross_edges = int((labels[graph.edges[:, 0]] != labels[graph.edges[:, 1]]).sum())
    available = cross_pairs - cross_edges
    if available < want:
        raise NoiseInjectionError(
            f"need {want} cross-class non-edges but only {available} exist "
            f"(shortfall {want - available})"
        )

    rng = np.random.default_rng(rng_seed)
    existing = set(graph.edge_keys().tolist())
    chosen: list[int] = []
    seen: set[int] = set()
    if want > available // 2:
        # dense regime: sample directly from the enumerated pool
        iu, ju = np.triu_indices(n, k=1)
        ok = labels[iu] != labels[ju]
        keys = iu[ok] * n + ju[ok]
        keys = keys[~np.isin(keys, graph.edge_keys())]
        chosen = rng.choice(keys, size=want, replace=False).tolist()
    else:
        while len(chosen) < want:
            draw = rng.integers(0, n, size=(2 * (want - len(chosen)) + 16, 2))
            for a, b in draw.tolist():
                if a == b or labels[a] == labels[b]:
                    continue
                key = min(a, b) * n + max(a, b)
                if key in existing or key in seen:
                    continue
                seen.add(key)
                chosen.append(key)
                if len(chosen) == want:
                    break

    new = np.asarray(chosen, dtype=np.int64)
    injected = np.stack([new // n, new % n], axis=1)
    all_edges = np.concatenate([graph.edges, injected])
    flags = np.concatenate([np.ones(m, dtype=bool), np.zeros(want, dtype=bool)])
    order = np.lexsort((all_edges[:, 1], all_edges[:, 0]))
    noisy = Graph(n, np.ascontiguousarray(all_edges[order]))
    return NoisyGraph(noisy, flags[order], graph)


def adamic_adar(graph: Graph) -> PairSimilarity:
    """Adamic-Adar index sum_{u in N(i) & N(j)} 1/ln(d_u) for every edge."""
    if graph.n_edges == 0:
        raise ValueError("adamic_adar needs a graph with at least one edge")
    deg = graph.degrees.astype(np.float64)
    inv_log = np.zeros_like(deg)
    # only nodes with degree >= 2 can be common neighbours
    many = deg >= 2
    inv_log[many] = 1.0 / np.log(deg[many])
    adj = graph.adjacency
    src, dst = graph.edges[:, 0], graph.edges[:, 1]
    common = adj[src].multiply(adj[dst])
    values = np.asarray(common @ inv_log).ravel()
    values.setflags(write=False)
    return PairSimilarity(graph, values)


def synth_sbm(
    n_per_cluster: int,
    k_clusters: int,
    p_in: float,
    p_out: float,
    attr_dim: int = 16,
    attr_signal: float = 1.0,
    rng_seed: int = 0,
) -> Dataset:
    """Planted-partition SBM with Gaussian attributes.

    Each coordinate of a cluster mean is drawn from N(0, attr_signal^2);
    node attributes are the cluster mean plus unit Gaussian noise.
    """
    if not 0 <= p_out < p_in <= 1:
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if attr_signal < 0:
        raise ValueError("attr_signal must be non-negative")
    if n_per_cluster < 1 or k_clusters < 1 or attr_dim < 1:
        raise ValueError("n_per_cluster, k_clusters and attr_dim must be positive")
    rng = np.random.default_rng(rng_seed)
    n = n_per_cluster * k_clusters
    labels = np.repeat(np.arange(k_clusters), n_per_cluster)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(len(iu)) < prob
    graph = Graph(n, np.ascontiguousarray(np.stack([iu[hit], ju[hit]], axis=1)))
    means = rng.normal(0.0, attr_signal, size=(k_clusters, attr_dim))
    attributes = means[labels] + rng.normal(size=(n, attr_dim))
    return Dataset(graph, attributes, labels, np.arange(n))
