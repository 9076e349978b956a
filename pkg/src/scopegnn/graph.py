"""Graph loading, validation, normalization, and edge-drop regularization.

File formats:
  edges     -- UTF-8 text, one ``u<TAB>v`` pair per line, 0-based ids,
               ``#`` starts a comment line
  features  -- CSV, N rows x F columns of reals, no header
  labels    -- CSV lines ``node_id,class_index``; absent nodes are unlabeled
  masks     -- three lines ``train:``, ``val:``, ``test:`` each followed by
               space-separated node ids on the same line

Edges are stored undirected and deduplicated; input self-loops are dropped
(self-connections are re-added during normalization).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNLABELED = -1


class GraphValidationError(ValueError):
    """Input files violate the documented format or consistency rules."""


@dataclass
class Graph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) int array, u < v, deduplicated, no self-loops
    features: np.ndarray  # (N, F)
    labels: np.ndarray  # (N,) int, UNLABELED where unknown
    train_mask: np.ndarray  # index arrays, pairwise disjoint
    val_mask: np.ndarray
    test_mask: np.ndarray
    a_hat: np.ndarray = field(default=None, repr=False)  # cached normalized adjacency

    def __post_init__(self):
        if self.a_hat is None:
            self.a_hat = normalize_adjacency(self.n_nodes, self.edges)

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def n_classes(self):
        labeled = self.labels[self.labels != UNLABELED]
        return int(labeled.max()) + 1 if labeled.size else 0


def _canonical_edges(pairs, n_nodes):
    """Symmetrize, deduplicate, and drop self-loops."""
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    arr = np.asarray(pairs, dtype=np.int64)
    arr = np.sort(arr, axis=1)
    arr = arr[arr[:, 0] != arr[:, 1]]
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    arr = np.unique(arr, axis=0)
    return arr


def load_graph(edge_path, feature_path, label_path, mask_path) -> Graph:
    features = _load_features(feature_path)
    n_nodes = features.shape[0]
    edges = _load_edges(edge_path, n_nodes)
    labels = _load_labels(label_path, n_nodes)
    masks = _load_masks(mask_path, n_nodes)
    for name, m in zip(("train", "val", "test"), masks):
        bad = m[labels[m] == UNLABELED]
        if bad.size:
            raise GraphValidationError(f"{name} mask contains unlabeled node {bad[0]}")
    return Graph(n_nodes, edges, features, labels, *masks)


def _load_features(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError:
                raise GraphValidationError(f"{path}:{lineno}: malformed feature row")
    if not rows:
        raise GraphValidationError(f"{path}: empty feature file")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise GraphValidationError(f"{path}:{i + 1}: feature row width {len(r)} != {width}")
    return np.asarray(rows, dtype=np.float64)


def _load_edges(path, n_nodes):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            toks = line.split("\t")
            if len(toks) != 2:
                raise GraphValidationError(f"{path}:{lineno}: expected 'u<TAB>v'")
            try:
                u, v = int(toks[0]), int(toks[1])
            except ValueError:
                raise GraphValidationError(f"{path}:{lineno}: non-integer node id")
            if not (0 <= u < n_nodes and 0 <= v < n_nodes):
                raise GraphValidationError(f"{path}:{lineno}: node id out of range [0, {n_nodes})")
            pairs.append((u, v))
    return _canonical_edges(pairs, n_nodes)


def _load_labels(path, n_nodes):
    labels = np.full(n_nodes, UNLABELED, dtype=np.int64)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            toks = line.split(",")
            if len(toks) != 2:
                raise GraphValidationError(f"{path}:{lineno}: expected 'node_id,class_index'")
            try:
                node, cls = int(toks[0]), int(toks[1])
            except ValueError:
                raise GraphValidationError(f"{path}:{lineno}: non-integer entry")
            if not 0 <= node < n_nodes:
                raise GraphValidationError(f"{path}:{lineno}: node id out of range [0, {n_nodes})")
            if cls < 0:
                raise GraphValidationError(f"{path}:{lineno}: negative class index")
            labels[node] = cls
    return labels


def _load_masks(path, n_nodes):
    found = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            name, _, rest = line.partition(":")
            name = name.strip()
            if name not in ("train", "val", "test"):
                raise GraphValidationError(f"{path}:{lineno}: unknown mask section {name!r}")
            ids = np.array([int(tok) for tok in rest.split()], dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= n_nodes):
                raise GraphValidationError(f"{path}:{lineno}: node id out of range [0, {n_nodes})")
            if np.unique(ids).size != ids.size:
                raise GraphValidationError(f"{path}:{lineno}: duplicate node id inside mask")
            found[name] = ids
    for name in ("train", "val", "test"):
        if name not in found:
            raise GraphValidationError(f"{path}: missing '{name}:' line")
    masks = (found["train"], found["val"], found["test"])
    seen = set()
    for name, m in zip(("train", "val", "test"), masks):
        overlap = seen.intersection(m.tolist())
        if overlap:
            raise GraphValidationError(f"{path}: node {min(overlap)} appears in two masks")
        seen.update(m.tolist())
    return masks


def normalize_adjacency(n_nodes: int, edges: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}."""
    a = np.eye(n_nodes, dtype=np.float64)
    if edges.size:
        a[edges[:, 0], edges[:, 1]] = 1.0
        a[edges[:, 1], edges[:, 0]] = 1.0
    d_inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    a *= d_inv_sqrt[:, None]
    a *= d_inv_sqrt[None, :]
    # exact symmetry regardless of rounding in the two scalings
    return (a + a.T) / 2.0


def drop_edges(graph: Graph, rate: float, rng: np.random.Generator) -> Graph:
    """Per-epoch view with a uniformly sampled (1 - rate) fraction of edges kept.

    The original graph is untouched; the returned view shares features, labels,
    and masks but recomputes the normalized adjacency.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop_edges rate must be in [0, 1), got {rate}")
    if rate == 0.0 or graph.edges.shape[0] == 0:
        kept = graph.edges
    else:
        n_edges = graph.edges.shape[0]
        n_keep = n_edges - int(np.floor(rate * n_edges))
        idx = rng.choice(n_edges, size=n_keep, replace=False)
        kept = graph.edges[np.sort(idx)]
    return Graph(
        graph.n_nodes,
        kept,
        graph.features,
        graph.labels,
        graph.train_mask,
        graph.val_mask,
        graph.test_mask,
    )


# ---------------------------------------------------------------------------
# synthetic graphs for fixtures and theory checks


def erdos_renyi(n_nodes: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Undirected edge list of a G(n, p) draw."""
    upper = np.triu(rng.random((n_nodes, n_nodes)) < p, k=1)
    u, v = np.nonzero(upper)
    return np.stack([u, v], axis=1).astype(np.int64)


def sbm_classification_graph(
    nodes_per_block=30,
    n_blocks=2,
    p_in=0.3,
    p_out=0.02,
    n_features=8,
    feature_shift=1.0,
    train_frac=0.5,
    val_frac=0.25,
    rng=None,
) -> Graph:
    """Two-community stochastic block model with Gaussian class features.

    Blocks are the classes; each node's feature vector is a unit-variance
    Gaussian centered at its class mean. The split is stratified per block.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = nodes_per_block * n_blocks
    labels = np.repeat(np.arange(n_blocks), nodes_per_block).astype(np.int64)
    prob = np.where(labels[:, None] == labels[None, :], p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    u, v = np.nonzero(upper)
    edges = np.stack([u, v], axis=1).astype(np.int64)

    means = rng.normal(size=(n_blocks, n_features)) * feature_shift
    features = means[labels] + rng.normal(size=(n, n_features))

    train, val, test = [], [], []
    for b in range(n_blocks):
        idx = rng.permutation(np.where(labels == b)[0])
        n_train = int(round(train_frac * idx.size))
        n_val = int(round(val_frac * idx.size))
        train.extend(idx[:n_train])
        val.extend(idx[n_train : n_train + n_val])
        test.extend(idx[n_train + n_val :])
    return Graph(
        n,
        _canonical_edges([tuple(e) for e in edges], n),
        features,
        labels,
        np.sort(np.array(train, dtype=np.int64)),
        np.sort(np.array(val, dtype=np.int64)),
        np.sort(np.array(test, dtype=np.int64)),
    )
