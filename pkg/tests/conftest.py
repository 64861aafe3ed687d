import json

import numpy as np
import pytest

from legnn.graph import Graph, symmetrize


def write_toy_dataset(root, overrides=None):
    """4 nodes, 2 classes, path graph 0-1-2-3, nodes 0 and 1 in train."""
    files = {
        "meta.json": json.dumps({"num_nodes": 4, "num_classes": 2, "feature_dim": 2}),
        "edges.tsv": "0\t1\n1\t2\n2\t3\n",
        "features.tsv": "1.0\t0.0\n0.5\t0.5\n0.0\t1.0\n0.25\t-1.5\n",
        "labels.tsv": "0\t0\n1\t0\n2\t1\n3\t1\n",
        "split.tsv": "0\ttrain\n1\ttrain\n2\tvalid\n3\ttest\n",
    }
    files.update(overrides or {})
    root.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        if text is not None:
            (root / name).write_text(text, encoding="utf-8")
    return root


@pytest.fixture
def toy_dir(tmp_path):
    return write_toy_dataset(tmp_path / "toy")


def random_graph(rng, M, C, p_edge=0.3, p_label=0.7, F=3):
    """Random partially labeled graph with every class present when M >= C."""
    upper = np.triu(rng.random((M, M)) < p_edge, 1)
    edges = symmetrize(np.argwhere(upper))
    labels = np.full(M, -1)
    known = rng.random(M) < p_label
    labels[known] = rng.integers(0, C, size=known.sum())
    order = rng.permutation(M)
    cut = M // 2
    splits = {"train": order[:cut][labels[order[:cut]] >= 0], "valid": order[cut:], "test": []}
    return Graph(M, C, edges, rng.normal(size=(M, F)), labels, splits)


def two_community_graph(n=20, seed=0):
    """2-class homophilous toy graph: two cliques-ish joined by one edge, separable features."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    edges = []
    for c in (0, 1):
        members = np.flatnonzero(labels == c)
        for i, u in enumerate(members):
            for v in members[i + 1 : i + 3]:
                edges.append((u, v))
    edges.append((0, n - 1))
    X = np.where(labels[:, None] == 0, 1.0, -1.0) * np.ones((n, 2)) + 0.3 * rng.normal(size=(n, 2))
    order = rng.permutation(n)
    train = np.concatenate([np.flatnonzero(labels == c)[:4] for c in (0, 1)])
    rest = np.setdiff1d(order, train)
    splits = {"train": train, "valid": rest[:4], "test": rest[4:]}
    return Graph(n, 2, symmetrize(np.array(edges)), X, labels, splits)


# acceptance lines are repeated at the end of the run so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
