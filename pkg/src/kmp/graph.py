"""Graph container, propagation/Laplacian matrices, splits and feature noise."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

UNLABELED = -1


class GraphError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected, unweighted graph in CSR form with node features and labels.

    ``features`` is either a dense ``n x d`` array or a scipy CSR matrix
    (bag-of-words benchmarks are ~99% zeros).
    """

    n: int
    csr_offsets: np.ndarray
    csr_neighbors: np.ndarray
    features: np.ndarray | sp.csr_matrix
    labels: np.ndarray
    num_classes: int

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    @property
    def num_edges(self) -> int:
        return int(self.csr_neighbors.shape[0] // 2)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def isolated(self) -> np.ndarray:
        return np.flatnonzero(self.degrees == 0)

    @cached_property
    def gcn_operator(self) -> sp.csr_matrix:
        return gcn_norm(self)

    @cached_property
    def mean_operator(self) -> sp.csr_matrix:
        return mean_aggregator(self)

    def neighbors(self, u: int) -> np.ndarray:
        return self.csr_neighbors[self.csr_offsets[u] : self.csr_offsets[u + 1]]

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(self.csr_neighbors.shape[0])
        return sp.csr_matrix((data, self.csr_neighbors, self.csr_offsets), shape=(self.n, self.n))

    def edge_list(self) -> np.ndarray:
        """Each undirected edge once, as ``(u, v)`` with ``u < v``."""
        src = np.repeat(np.arange(self.n), self.degrees)
        keep = src < self.csr_neighbors
        return np.stack([src[keep], self.csr_neighbors[keep]], axis=1)

    def dense_features(self, rows=None) -> np.ndarray:
        x = self.features if rows is None else self.features[rows]
        return x.toarray() if sp.issparse(x) else np.asarray(x)

    def with_features(self, features) -> "Graph":
        return Graph(self.n, self.csr_offsets, self.csr_neighbors, features, self.labels, self.num_classes)

    def fingerprint(self) -> bytes:
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        h.update(self.csr_offsets.astype(np.int64).tobytes())
        h.update(self.csr_neighbors.astype(np.int64).tobytes())
        return h.digest()


def build_graph(edges, features, labels=None, num_classes: int | None = None) -> Graph:
    """Symmetrise, deduplicate and drop self-loops from ``edges``."""
    if sp.issparse(features):
        features = sp.csr_matrix(features, dtype=np.float64)
    else:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise GraphError(f"features must be 2-D, got shape {features.shape}")
    n = features.shape[0]
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        bad = edges[(edges < 0).any(axis=1) | (edges >= n).any(axis=1)][0]
        raise GraphError(f"edge {tuple(bad)} has a node id outside [0, {n})")
    edges = edges[edges[:, 0] != edges[:, 1]]
    both = np.concatenate([edges, edges[:, ::-1]])
    adj = sp.csr_matrix((np.ones(both.shape[0]), (both[:, 0], both[:, 1])), shape=(n, n))
    adj.sum_duplicates()
    adj.sort_indices()
    if labels is None:
        labels = np.full(n, UNLABELED, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise GraphError(f"labels length {labels.shape[0]} does not match {n} feature rows")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if (labels >= 0).any() else 0
    if (labels >= num_classes).any():
        raise GraphError(f"label id {labels.max()} is not below class count {num_classes}")
    return Graph(
        n=n,
        csr_offsets=adj.indptr.astype(np.int64),
        csr_neighbors=adj.indices.astype(np.int64),
        features=features,
        labels=labels,
        num_classes=int(num_classes),
    )


def gcn_norm(graph: Graph) -> sp.csr_matrix:
    """``D~^{-1/2} (A + I) D~^{-1/2}`` as a sparse matrix."""
    a = graph.adjacency() + sp.identity(graph.n, format="csr")
    d = np.asarray(a.sum(axis=1)).ravel()
    inv = sp.diags(1.0 / np.sqrt(d))
    out = (inv @ a @ inv).tocsr()
    # exact symmetry: average with the transpose
    return ((out + out.T) * 0.5).tocsr()


def sampled_mean_aggregator(graph: Graph, fanout: int, rng: np.random.Generator) -> sp.csr_matrix:
    """Mean over at most ``fanout`` neighbors drawn without replacement per node."""
    deg = graph.degrees
    rows = np.repeat(np.arange(graph.n), deg)
    order = np.lexsort((rng.random(rows.shape[0]), rows))
    rank = np.arange(rows.shape[0]) - np.repeat(graph.csr_offsets[:-1], deg)
    keep = order[rank < fanout]
    r, c = rows[keep], graph.csr_neighbors[keep]
    cnt = np.minimum(deg, fanout).astype(np.float64)
    data = 1.0 / cnt[r]
    return sp.csr_matrix((data, (r, c)), shape=(graph.n, graph.n))


def mean_aggregator(graph: Graph) -> sp.csr_matrix:
    """Row-normalised adjacency; isolated rows stay zero (neighbor mean 0)."""
    a = graph.adjacency()
    d = graph.degrees.astype(np.float64)
    inv = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
    return (sp.diags(inv) @ a).tocsr()


def normalized_laplacian(graph: Graph, isolated: str = "error") -> np.ndarray:
    """Dense ``I - D^{-1/2} A D^{-1/2}``.

    ``isolated="error"`` rejects degree-0 nodes; ``"self_loop"`` gives each a
    unit self-loop, which makes it a trivial component (zero eigenvalue).
    """
    deg = graph.degrees.astype(np.float64)
    a = graph.adjacency().toarray()
    iso = np.flatnonzero(deg == 0)
    if iso.size:
        if isolated == "error":
            raise GraphError(f"degenerate degree: {iso.size} isolated node(s), first id {iso[0]}")
        if isolated != "self_loop":
            raise ValueError(f"unknown isolated-node policy {isolated!r}")
        a[iso, iso] = 1.0
        deg[iso] = 1.0
    s = 1.0 / np.sqrt(deg)
    lap = np.eye(graph.n) - s[:, None] * a * s[None, :]
    return 0.5 * (lap + lap.T)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    """Node id sets for one experiment.

    The four role sets are pairwise disjoint. ``observed`` lists every node
    visible during stages I-II; in transductive mode that is the whole graph.
    """

    mode: str
    train_labeled: np.ndarray
    train_soft: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    observed: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def soft_pool(self) -> np.ndarray:
        """Nodes that receive teacher soft targets during distillation.

        Transductive runs see every node's features and structure, so
        validation and test nodes join the soft pool (their labels stay
        hidden). Inductive runs use only observed, unlabeled training nodes.
        """
        if self.mode == "transductive":
            return np.sort(np.concatenate([self.train_soft, self.validation, self.test]))
        return self.train_soft


def _check_classes(labels: np.ndarray, pool: np.ndarray, num_classes: int, per_class: int) -> None:
    for c in range(num_classes):
        have = int((labels[pool] == c).sum())
        if have < per_class:
            raise SplitError(f"class {c} has {have} nodes, needs at least {per_class}")


def make_split(
    graph: Graph,
    mode: str = "transductive",
    labeled_per_class: int = 20,
    validation_count: int = 30,
    seed: int = 0,
    holdout_fraction: float = 0.2,
) -> SplitSpec:
    """Random 20-per-class labeled set, 30 validation nodes, rest test.

    Inductive mode first removes ``holdout_fraction`` of nodes uniformly at
    random as unobserved test nodes and splits the observed rest the same
    way; observed non-labeled, non-validation nodes form ``train_soft``.
    """
    if mode not in ("transductive", "inductive"):
        raise SplitError(f"unknown split mode {mode!r}")
    rng = np.random.default_rng(seed)
    labels = graph.labels
    all_ids = np.arange(graph.n)
    if mode == "inductive":
        perm = rng.permutation(graph.n)
        n_hold = int(round(holdout_fraction * graph.n))
        unobserved = np.sort(perm[:n_hold])
        observed = np.sort(perm[n_hold:])
    else:
        unobserved = np.empty(0, dtype=np.int64)
        observed = all_ids
    pool = observed[labels[observed] >= 0]
    _check_classes(labels, pool, graph.num_classes, labeled_per_class)
    train = []
    for c in range(graph.num_classes):
        members = pool[labels[pool] == c]
        train.append(rng.choice(members, size=labeled_per_class, replace=False))
    train_labeled = np.sort(np.concatenate(train)) if train else np.empty(0, dtype=np.int64)
    rest = np.setdiff1d(observed, train_labeled)
    if validation_count > rest.size:
        raise SplitError(f"validation needs {validation_count} nodes, only {rest.size} left")
    validation = np.sort(rng.choice(rest, size=validation_count, replace=False))
    rest = np.setdiff1d(rest, validation)
    if mode == "transductive":
        test, train_soft = rest, np.empty(0, dtype=np.int64)
    else:
        test, train_soft = unobserved, rest
    return SplitSpec(
        mode=mode,
        train_labeled=train_labeled.astype(np.int64),
        train_soft=train_soft.astype(np.int64),
        validation=validation.astype(np.int64),
        test=test.astype(np.int64),
        observed=observed.astype(np.int64),
        seed=seed,
    )


def induced_subgraph(graph: Graph, observed) -> tuple[Graph, np.ndarray]:
    """Subgraph on ``observed`` (sorted). Returns it with the new->old id map."""
    observed = np.unique(np.asarray(observed, dtype=np.int64))
    if observed.size == 0:
        raise GraphError("induced_subgraph needs a nonempty observed set")
    remap = np.full(graph.n, -1, dtype=np.int64)
    remap[observed] = np.arange(observed.size)
    edges = graph.edge_list()
    keep = (remap[edges[:, 0]] >= 0) & (remap[edges[:, 1]] >= 0)
    sub_edges = remap[edges[keep]]
    feats = graph.features[observed]
    sub = build_graph(sub_edges, feats, graph.labels[observed], graph.num_classes)
    return sub, observed


# ---------------------------------------------------------------------------
# robustness


def add_feature_noise(features, fraction: float, seed: int):
    """Convex blend ``(1 - p) X + p R`` with ``R`` uniform on each feature's range."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"noise fraction must lie in [0, 1], got {fraction}")
    if fraction == 0.0:
        return features.copy()
    x = features.toarray() if sp.issparse(features) else np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    lo = x.min(axis=0, keepdims=True)
    hi = x.max(axis=0, keepdims=True)
    noise = lo + rng.random(x.shape) * (hi - lo)
    return (1.0 - fraction) * x + fraction * noise
