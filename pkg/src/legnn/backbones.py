"""GCN / GraphSAGE / GAT layers over the node+label graph, plus the
Vanilla, Concat and Addition baseline input pipelines.

All four methods share one layer implementation. The baselines run it on a
node-only graph (no label vertices), so comparisons differ only in how labels
are used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import SparseMatrix, Tensor
from .errors import ContractError, DimensionError, UsageError
from .graph import Graph, HeteroGraph, build_hetero_graph

KINDS = ("gcn", "sage", "gat")
METHODS = ("vanilla", "concat", "addition", "legnn")
DEFAULT_ACTIVATION = {"gcn": "relu", "sage": "relu", "gat": "elu"}


@dataclass
class BackboneConfig:
    kind: str = "gcn"
    num_layers: int = 2
    hidden: int = 16
    heads: int = 1
    fanouts: list[int] | None = None
    residual: bool = True
    dropout: float = 0.0
    activation: str | None = None
    leaky_slope: float = 0.2
    method: str = "legnn"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"kind: expected one of {KINDS}, got {self.kind!r}")
        if self.method not in METHODS:
            raise UsageError(f"method: expected one of {METHODS}, got {self.method!r}")
        if self.num_layers < 1:
            raise UsageError("num_layers: must be >= 1")
        if self.hidden < 1:
            raise UsageError("hidden: must be >= 1")
        if self.heads < 1 or (self.kind != "gat" and self.heads != 1):
            raise UsageError("heads: must be 1 unless kind is gat")
        if self.kind == "sage":
            if self.fanouts is None:
                self.fanouts = [15, 10, 5][: self.num_layers] + [5] * max(0, self.num_layers - 3)
            if len(self.fanouts) != self.num_layers or min(self.fanouts) < 1:
                raise UsageError("fanouts: need one positive fan-out per layer")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("dropout: must lie in [0, 1)")
        if self.activation is None:
            self.activation = DEFAULT_ACTIVATION[self.kind]
        if self.leaky_slope <= 0:
            raise UsageError("leaky_slope: must be > 0")


class ModelParams:
    """Named parameter tensors, all tracked for gradients.

    Names: ``P_N``, ``P_L``, ``W_N.{layer}.{head}``, ``W_L.{layer}.{head}``,
    ``a_N.{layer}.{head}``, ``a_L.{layer}.{head}``, ``W_pred``, ``b_pred``,
    ``W_L_aug``. Only the ones a method uses are present.
    """

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self.tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def add(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.items()}
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, arr in state.items():
            self.tensors[k].data[...] = arr

    def zero_label_path(self) -> None:
        """Set every label-specific parameter to zero (in place)."""
        for k, t in self.items():
            if k.split(".")[0] in ("P_L", "W_L", "a_L"):
                t.data[...] = 0.0

    def count(self) -> int:
        return int(sum(t.data.size for t in self))


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_params(
    config: BackboneConfig,
    num_features: int,
    num_classes: int,
    label_feature_dim: int | None = None,
    seed: int | np.random.Generator = 0,
) -> ModelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    D, C, F = config.hidden, num_classes, num_features
    legnn = config.method == "legnn"
    params = ModelParams()
    in_dim = F + C if config.method == "concat" else F
    params.add("P_N", _glorot(rng, in_dim, D))
    if legnn:
        params.add("P_L", _glorot(rng, label_feature_dim or C, D))
    if config.method == "addition":
        params.add("W_L_aug", _glorot(rng, C, F))
    for k in range(config.num_layers):
        for h in range(config.heads):
            params.add(f"W_N.{k}.{h}", _glorot(rng, D, D))
            if legnn:
                params.add(f"W_L.{k}.{h}", _glorot(rng, D, D))
            if config.kind == "gat":
                params.add(f"a_N.{k}.{h}", _glorot(rng, D, 1))
                if legnn:
                    params.add(f"a_L.{k}.{h}", _glorot(rng, D, 1))
    params.add("W_pred", _glorot(rng, D, C))
    params.add("b_pred", np.zeros((1, C)))
    return params


# -- adjacency builders ----------------------------------------------------


def node_graph(g: Graph) -> HeteroGraph:
    """The plain node-only graph in the same container (no label vertices)."""
    return HeteroGraph(g.num_nodes, 0, g.adjacency(), np.zeros(0, dtype=np.int64))


def gcn_normalize(h: HeteroGraph) -> SparseMatrix:
    """D^-1/2 (A' + I) D^-1/2 over all vertices, D the degree of A' + I."""
    n = h.size
    a = h.adjacency.to_scipy()
    a_hat = (a + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    norm = sp.diags(inv_sqrt) @ a_hat @ sp.diags(inv_sqrt)
    return SparseMatrix.from_scipy(norm)


def mean_adjacency(h: HeteroGraph) -> SparseMatrix:
    """Row-normalized A' (each stored entry 1/row degree)."""
    adj = h.adjacency
    deg = np.diff(adj.indptr)
    vals = 1.0 / deg[adj.row_ids()]
    return adj.with_values(vals)


def sample_neighbors(h: HeteroGraph, fanouts, seed) -> list[SparseMatrix]:
    """One mean-normalized adjacency per layer keeping at most ``fanouts[k]``
    uniformly sampled neighbors per vertex (without replacement)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    adj = h.adjacency
    out = []
    for fanout in fanouts:
        if fanout < 1:
            raise ContractError("fan-out must be >= 1")
        indptr = [0]
        indices = []
        for r in range(adj.rows):
            nbrs = adj.indices[adj.indptr[r] : adj.indptr[r + 1]]
            if len(nbrs) > fanout:
                nbrs = np.sort(rng.choice(nbrs, size=fanout, replace=False))
            indices.append(nbrs)
            indptr.append(indptr[-1] + len(nbrs))
        indices = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
        counts = np.diff(indptr)
        vals = 1.0 / np.repeat(counts, counts).astype(np.float64)
        out.append(SparseMatrix(adj.shape, indptr, indices, vals))
    return out


# -- layers ----------------------------------------------------------------


def project_inputs(X: Tensor, E: Tensor | None, params: ModelParams) -> Tensor:
    """Stack ``X P_N`` over ``E P_L`` into the (M+C) x D input block."""
    P_N = params["P_N"]
    if X.cols != P_N.rows:
        raise DimensionError(f"project_inputs: X has {X.cols} features, P_N expects {P_N.rows}")
    H_N = ad.matmul(X, P_N)
    if E is None:
        return H_N
    P_L = params["P_L"]
    if E.cols != P_L.rows:
        raise DimensionError(f"project_inputs: E has {E.cols} features, P_L expects {P_L.rows}")
    return ad.vstack([H_N, ad.matmul(E, P_L)])


def _type_transform(H: Tensor, num_nodes: int, W_N: Tensor, W_L: Tensor | None) -> Tensor:
    if H.cols != W_N.rows:
        raise DimensionError(f"layer input width {H.cols} != weight rows {W_N.rows}")
    if H.rows == num_nodes:
        return ad.matmul(H, W_N)
    H_N = ad.slice_rows(H, 0, num_nodes)
    H_L = ad.slice_rows(H, num_nodes, H.rows)
    return ad.vstack([ad.matmul(H_N, W_N), ad.matmul(H_L, W_L)])


def attention_logits(
    T: Tensor, structure: SparseMatrix, num_nodes: int, a_N: Tensor, a_L: Tensor | None, slope: float
) -> Tensor:
    """Per-edge LeakyReLU(a_type(u).(W h_u) + a_type(v).(W h_v)) for edge u<-v."""
    if T.rows == num_nodes:
        s = ad.matmul(T, a_N)
    else:
        s = ad.vstack(
            [
                ad.matmul(ad.slice_rows(T, 0, num_nodes), a_N),
                ad.matmul(ad.slice_rows(T, num_nodes, T.rows), a_L),
            ]
        )
    beta = ad.add(ad.gather_rows(s, structure.row_ids()), ad.gather_rows(s, structure.indices))
    return ad.apply_activation(beta, "leaky_relu", slope)


def gat_attention(
    T: Tensor, structure: SparseMatrix, num_nodes: int, a_N: Tensor, a_L: Tensor | None, slope: float
) -> Tensor:
    """Attention weights (nnz x 1), softmax-normalized over each row's neighbors."""
    beta = attention_logits(T, structure, num_nodes, a_N, a_L, slope)
    return ad.edge_softmax(beta, structure.indptr)


def gat_edge_weights(H: Tensor, h: HeteroGraph, params: ModelParams, layer: int, head: int = 0,
                     slope: float = 0.2) -> SparseMatrix:
    """Attention-valued copy of ``h.adjacency`` for one layer and head.

    Vertices without neighbors keep empty rows.
    """
    W_L = params.tensors.get(f"W_L.{layer}.{head}")
    a_L = params.tensors.get(f"a_L.{layer}.{head}")
    T = _type_transform(H, h.num_nodes, params[f"W_N.{layer}.{head}"], W_L)
    w = gat_attention(T, h.adjacency, h.num_nodes, params[f"a_N.{layer}.{head}"], a_L, slope)
    return h.adjacency.with_values(w.data[:, 0])


def hetero_layer_forward(
    H: Tensor,
    adjacency: SparseMatrix,
    params: ModelParams,
    layer: int,
    config: BackboneConfig,
    num_nodes: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One message-passing layer on the (M+C)-row state ``H``.

    Node rows aggregate transformed node and label messages, label rows
    aggregate transformed node messages. For GAT, ``adjacency`` supplies the
    edge structure and its values are replaced by attention weights.
    """
    X_in = H
    if training and config.dropout > 0:
        if rng is None:
            raise ContractError("dropout in training mode needs an rng")
        X_in = ad.dropout(H, config.dropout, rng)
    heads = []
    for h in range(config.heads):
        W_N = params[f"W_N.{layer}.{h}"]
        W_L = params.tensors.get(f"W_L.{layer}.{h}")
        T = _type_transform(X_in, num_nodes, W_N, W_L)
        if config.kind == "gat":
            a_L = params.tensors.get(f"a_L.{layer}.{h}")
            w = gat_attention(T, adjacency, num_nodes, params[f"a_N.{layer}.{h}"], a_L,
                              config.leaky_slope)
            heads.append(ad.spmm_values(adjacency, w, T))
        else:
            heads.append(ad.spmm(adjacency, T))
    agg = heads[0]
    for extra in heads[1:]:
        agg = ad.add(agg, extra)
    if len(heads) > 1:
        agg = ad.scale(agg, 1.0 / len(heads))
    if config.residual:
        agg = ad.add(agg, H)
    return ad.apply_activation(agg, config.activation)


def layer_adjacencies(
    h: HeteroGraph, config: BackboneConfig, training: bool, rng: np.random.Generator | None
) -> list[SparseMatrix]:
    K = config.num_layers
    if config.kind == "gcn":
        return [gcn_normalize(h)] * K
    if config.kind == "gat":
        return [h.adjacency] * K
    if training:
        if rng is None:
            raise ContractError("neighbor sampling in training mode needs an rng")
        return sample_neighbors(h, config.fanouts, rng)
    return [mean_adjacency(h)] * K


# -- baseline input pipelines ----------------------------------------------


def visible_labels(g: Graph, visible) -> np.ndarray:
    """Y with every row outside ``visible`` zeroed."""
    Y = np.zeros((g.num_nodes, g.num_classes))
    visible = np.asarray(visible, dtype=np.int64)
    if len(visible):
        if np.any(g.labels[visible] < 0):
            raise ContractError("visible set contains unlabeled nodes")
        Y[visible, g.labels[visible]] = 1.0
    return Y


def augment_concat(X, Y_visible) -> Tensor:
    X = X if isinstance(X, Tensor) else Tensor(X)
    Y_visible = Y_visible if isinstance(Y_visible, Tensor) else Tensor(Y_visible)
    return ad.hstack([X, Y_visible])


def augment_addition(X, Y_visible, W_L_aug: Tensor) -> Tensor:
    X = X if isinstance(X, Tensor) else Tensor(X)
    Y_visible = Y_visible if isinstance(Y_visible, Tensor) else Tensor(Y_visible)
    if W_L_aug.shape != (Y_visible.cols, X.cols):
        raise DimensionError(
            f"augment_addition: W_L_aug must be {(Y_visible.cols, X.cols)}, got {W_L_aug.shape}"
        )
    return ad.add(X, ad.matmul(Y_visible, W_L_aug))


# -- full model ------------------------------------------------------------


class ForwardOutput(NamedTuple):
    Z_N: Tensor
    Z_L: Tensor | None
    logits: Tensor
    probs: Tensor


def forward(
    g: Graph,
    label_feats,
    connected,
    params: ModelParams,
    config: BackboneConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Run the configured method end to end.

    ``connected`` is the set of labeled nodes whose labels the model may see:
    label-vertex edges for LEGNN, visible one-hot rows for Concat/Addition,
    ignored by Vanilla.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    M = g.num_nodes
    X = Tensor(g.X)
    if config.method == "legnn":
        hg = build_hetero_graph(g, connected)
        E = Tensor(label_feats)
        if E.rows != g.num_classes:
            raise DimensionError(f"label features need {g.num_classes} rows, got {E.rows}")
        H = project_inputs(X, E, params)
    else:
        hg = node_graph(g)
        if config.method == "concat":
            X = augment_concat(X, visible_labels(g, connected))
        elif config.method == "addition":
            X = augment_addition(X, visible_labels(g, connected), params["W_L_aug"])
        H = project_inputs(X, None, params)
    adjs = layer_adjacencies(hg, config, training, rng)
    for k in range(config.num_layers):
        H = hetero_layer_forward(H, adjs[k], params, k, config, M, training, rng)
    if H.rows > M:
        Z_N = ad.slice_rows(H, 0, M)
        Z_L = ad.slice_rows(H, M, H.rows)
    else:
        Z_N, Z_L = H, None
    logits = ad.add(ad.matmul(Z_N, params["W_pred"]), params["b_pred"])
    return ForwardOutput(Z_N, Z_L, logits, ad.softmax_rows(logits))
