"""Partially labeled graphs, the node+label graph, and dataset utilities."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .autodiff import SparseMatrix
from .errors import CapacityError, ContractError, FormatError, UndefinedValueError

SPLIT_NAMES = ("train", "valid", "test")


@dataclass(frozen=True, eq=False)
class Graph:
    """An immutable, partially labeled graph.

    ``edges`` holds every stored direction (an undirected edge appears as both
    ``(u, v)`` and ``(v, u)``). ``labels[i]`` is the class of node ``i`` or -1
    when unknown; ``Y`` is the matching one-hot matrix with zero rows for
    unlabeled nodes.
    """

    num_nodes: int
    num_classes: int
    edges: np.ndarray  # (E, 2) int64
    X: np.ndarray  # (M, F) float64
    labels: np.ndarray  # (M,) int64, -1 = unlabeled
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        M, C = self.num_nodes, self.num_classes
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        X = np.asarray(self.X, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != M:
            raise ContractError(f"features must have {M} rows, got shape {X.shape}")
        if labels.shape != (M,):
            raise ContractError(f"labels must have length {M}")
        if np.any(labels >= C) or np.any(labels < -1):
            raise ContractError("label ids must lie in [0, C) or be -1")
        if len(edges) and (edges.min() < 0 or edges.max() >= M):
            raise ContractError("edge endpoint outside [0, M)")
        splits = {}
        for name in SPLIT_NAMES:
            ids = np.unique(np.asarray(self.splits.get(name, []), dtype=np.int64))
            if len(ids) and (ids.min() < 0 or ids.max() >= M):
                raise ContractError(f"split {name!r} has node id outside [0, M)")
            splits[name] = ids
        for i, a in enumerate(SPLIT_NAMES):
            for b in SPLIT_NAMES[i + 1 :]:
                if np.intersect1d(splits[a], splits[b]).size:
                    raise ContractError(f"splits {a!r} and {b!r} overlap")
        for arr in (edges, X, labels, *splits.values()):
            arr.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "splits", splits)

    @property
    def num_features(self) -> int:
        return self.X.shape[1]

    @property
    def num_undirected_edges(self) -> int:
        e = self.edges
        return int(np.sum(e[:, 0] < e[:, 1]) + np.sum(e[:, 0] == e[:, 1]))

    @property
    def Y(self) -> np.ndarray:
        Y = np.zeros((self.num_nodes, self.num_classes))
        known = self.labels >= 0
        Y[np.flatnonzero(known), self.labels[known]] = 1.0
        return Y

    @property
    def labeled(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def train(self) -> np.ndarray:
        return self.splits["train"]

    @property
    def valid(self) -> np.ndarray:
        return self.splits["valid"]

    @property
    def test(self) -> np.ndarray:
        return self.splits["test"]

    @cached_property
    def _adjacency(self) -> SparseMatrix:
        M = self.num_nodes
        adj = SparseMatrix.from_coo((M, M), self.edges[:, 0], self.edges[:, 1])
        return adj.with_values(np.ones(adj.nnz))

    def adjacency(self) -> SparseMatrix:
        """Binary M x M adjacency (duplicate edges collapse to 1)."""
        return self._adjacency

    def with_edges(self, edges) -> "Graph":
        return Graph(self.num_nodes, self.num_classes, edges, self.X, self.labels, self.splits)

    def permuted(self, perm) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return Graph(
            self.num_nodes,
            self.num_classes,
            perm[self.edges],
            self.X[inv],
            self.labels[inv],
            {k: perm[v] for k, v in self.splits.items()},
        )


def symmetrize(edges) -> np.ndarray:
    """Both directions of every edge, deduplicated, self-loops kept as-is."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    both = np.vstack([edges, edges[:, ::-1]])
    return np.unique(both, axis=0) if len(both) else both


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    """The (M+C)-vertex node+label graph.

    ``adjacency`` has the block layout ``[[A, Yc], [Yc^T, 0]]`` where ``Yc``
    keeps only the rows of ``connected`` nodes.
    """

    num_nodes: int
    num_classes: int
    adjacency: SparseMatrix
    connected: np.ndarray

    @property
    def size(self) -> int:
        return self.num_nodes + self.num_classes


def label_features(num_classes: int) -> np.ndarray:
    """Default label feature matrix: one-hot encodings (C x C identity)."""
    return np.eye(num_classes)


def build_hetero_graph(g: Graph, connected) -> HeteroGraph:
    connected = np.unique(np.asarray(connected, dtype=np.int64))
    if len(connected) and np.any(g.labels[connected] < 0):
        bad = connected[g.labels[connected] < 0][0]
        raise ContractError(f"node {bad} has no label and cannot be label-connected")
    M, C = g.num_nodes, g.num_classes
    base = g.adjacency()
    rows = [base.row_ids()]
    cols = [base.indices]
    label_vertex = M + g.labels[connected]
    rows += [connected, label_vertex]
    cols += [label_vertex, connected]
    adj = SparseMatrix.from_coo((M + C, M + C), np.concatenate(rows), np.concatenate(cols))
    return HeteroGraph(M, C, adj, connected)


def compute_homophily(g: Graph) -> float:
    """Fraction of stored edges between labeled nodes whose endpoints agree."""
    u, v = g.edges[:, 0], g.edges[:, 1]
    lu, lv = g.labels[u], g.labels[v]
    considered = (lu >= 0) & (lv >= 0)
    n = int(considered.sum())
    if n == 0:
        raise UndefinedValueError("homophily undefined: no edge joins two labeled nodes")
    return float(np.sum(lu[considered] == lv[considered]) / n)


def generate_synthetic(g: Graph, num_edges: int, seed: int) -> Graph:
    """Add ``num_edges`` new undirected cross-label edges between labeled nodes.

    A first endpoint is drawn uniformly from the labeled nodes, a second
    uniformly from labeled nodes of a different class; self-loops and edges
    that already exist are rejected and redrawn.
    """
    if num_edges < 0:
        raise ContractError("edge count must be non-negative")
    if num_edges == 0:
        return g
    labeled = g.labeled
    labels = g.labels
    classes = np.unique(labels[labeled])
    if len(classes) < 2:
        raise ContractError("need at least two classes among labeled nodes")

    existing = {(int(a), int(b)) for a, b in g.edges}
    existing |= {(b, a) for a, b in existing}
    # capacity: unordered cross-label pairs not already present
    counts = np.array([np.sum(labels[labeled] == c) for c in classes], dtype=np.int64)
    total_pairs = (counts.sum() ** 2 - np.sum(counts**2)) // 2
    present = sum(
        1 for a, b in existing if a < b and labels[a] >= 0 and labels[b] >= 0 and labels[a] != labels[b]
    )
    if num_edges > total_pairs - present:
        raise CapacityError(
            f"cannot place {num_edges} new cross-label edges; only {total_pairs - present} free pairs"
        )

    outside = {int(c): labeled[labels[labeled] != c] for c in classes}
    rng = np.random.default_rng(seed)
    added = []
    while len(added) < num_edges:
        i = int(labeled[rng.integers(len(labeled))])
        pool = outside[int(labels[i])]
        j = int(pool[rng.integers(len(pool))])
        if (i, j) in existing:
            continue
        existing.add((i, j))
        existing.add((j, i))
        added.append((i, j))
    new = np.array(added, dtype=np.int64)
    edges = np.vstack([g.edges, new, new[:, ::-1]])
    return g.with_edges(edges)


def planted_partition(
    num_nodes: int = 200,
    num_classes: int = 4,
    num_features: int = 16,
    avg_degree: float = 6.0,
    homophily: float = 0.8,
    feature_noise: float = 1.0,
    feature_signal: float = 1.0,
    split=(0.3, 0.2, 0.5),
    seed: int = 0,
) -> Graph:
    """Stochastic-block-model graph with Gaussian class-centred features.

    Each node draws about ``avg_degree / 2`` partners, a fraction ``homophily``
    of them from its own class. Splits are random with the given fractions.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(num_nodes) % num_classes
    rng.shuffle(labels)
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    pairs = set()
    per_node = max(1, int(round(avg_degree / 2)))
    for u in range(num_nodes):
        for _ in range(per_node):
            if rng.random() < homophily:
                pool = by_class[labels[u]]
            else:
                pool = np.flatnonzero(labels != labels[u])
            v = int(pool[rng.integers(len(pool))])
            if v != u:
                pairs.add((min(u, v), max(u, v)))
    edges = symmetrize(np.array(sorted(pairs), dtype=np.int64))
    centers = feature_signal * rng.normal(size=(num_classes, num_features))
    X = centers[labels] + feature_noise * rng.normal(size=(num_nodes, num_features))
    order = rng.permutation(num_nodes)
    n_train = int(round(split[0] * num_nodes))
    n_valid = int(round(split[1] * num_nodes))
    splits = {
        "train": order[:n_train],
        "valid": order[n_train : n_train + n_valid],
        "test": order[n_train + n_valid :],
    }
    return Graph(num_nodes, num_classes, edges, X, labels, splits)


# -- dataset directory I/O -------------------------------------------------


def _read_lines(path: Path):
    if not path.is_file():
        raise FormatError("missing file", path)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line.split("\t")


def load_dataset(path) -> Graph:
    """Read a dataset directory (meta.json, edges/features/labels/split .tsv).

    Input edges are symmetrized: both directions are stored.
    """
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise FormatError("missing file", meta_path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        M = int(meta["num_nodes"])
        C = int(meta["num_classes"])
        F = int(meta["feature_dim"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad metadata ({exc})", meta_path) from None

    def ints(fields, p, lineno, n):
        if len(fields) != n:
            raise FormatError(f"expected {n} tab-separated fields, got {len(fields)}", p, lineno)
        try:
            return [int(x) for x in fields]
        except ValueError:
            raise FormatError("expected integer fields", p, lineno) from None

    p = root / "edges.tsv"
    edges = []
    for lineno, fields in _read_lines(p):
        u, v = ints(fields, p, lineno, 2)
        if not (0 <= u < M and 0 <= v < M):
            raise FormatError(f"node id outside [0, {M})", p, lineno)
        edges.append((u, v))

    p = root / "features.tsv"
    X = []
    for lineno, fields in _read_lines(p):
        if len(fields) != F:
            raise FormatError(f"ragged row: expected {F} features, got {len(fields)}", p, lineno)
        try:
            X.append([float(x) for x in fields])
        except ValueError:
            raise FormatError("non-numeric feature", p, lineno) from None
    if len(X) != M:
        raise FormatError(f"expected {M} feature rows, got {len(X)}", p)

    p = root / "labels.tsv"
    labels = np.full(M, -1, dtype=np.int64)
    for lineno, fields in _read_lines(p):
        node, cls = ints(fields, p, lineno, 2)
        if not 0 <= node < M:
            raise FormatError(f"node id outside [0, {M})", p, lineno)
        if not 0 <= cls < C:
            raise FormatError(f"label id {cls} not in [0, {C})", p, lineno)
        if labels[node] >= 0 and labels[node] != cls:
            raise FormatError(f"node {node} labeled twice", p, lineno)
        labels[node] = cls

    p = root / "split.tsv"
    owner: dict[int, str] = {}
    splits: dict[str, list[int]] = {name: [] for name in SPLIT_NAMES}
    for lineno, fields in _read_lines(p):
        if len(fields) != 2 or fields[1] not in SPLIT_NAMES:
            raise FormatError("expected node_id<TAB>{train|valid|test}", p, lineno)
        try:
            node = int(fields[0])
        except ValueError:
            raise FormatError("expected integer node id", p, lineno) from None
        if not 0 <= node < M:
            raise FormatError(f"node id outside [0, {M})", p, lineno)
        if node in owner and owner[node] != fields[1]:
            raise FormatError(
                f"node {node} appears in both {owner[node]!r} and {fields[1]!r}", p, lineno
            )
        owner[node] = fields[1]
        splits[fields[1]].append(node)

    edge_arr = symmetrize(np.array(edges, dtype=np.int64).reshape(-1, 2))
    X_arr = np.array(X, dtype=np.float64).reshape(M, F)
    return Graph(M, C, edge_arr, X_arr, labels, splits)


def save_dataset(g: Graph, path) -> None:
    """Write ``g`` in the dataset directory format (one line per stored edge)."""
    root = Path(path)
    os.makedirs(root, exist_ok=True)
    meta = {"num_nodes": g.num_nodes, "num_classes": g.num_classes, "feature_dim": g.num_features}
    (root / "meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
    with open(root / "edges.tsv", "w", encoding="utf-8") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    with open(root / "features.tsv", "w", encoding="utf-8") as fh:
        for row in g.X:
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")
    with open(root / "labels.tsv", "w", encoding="utf-8") as fh:
        for node in g.labeled:
            fh.write(f"{node}\t{g.labels[node]}\n")
    with open(root / "split.tsv", "w", encoding="utf-8") as fh:
        for name in SPLIT_NAMES:
            for node in g.splits[name]:
                fh.write(f"{node}\t{name}\n")
