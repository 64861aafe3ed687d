"""Training loop with per-epoch training-node selection and adaptive
self-training (confidence-gated, confidence-weighted pseudo labels)."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .backbones import BackboneConfig, ForwardOutput, ModelParams, forward
from .errors import ContractError, DegenerateSplitError, TrainingAborted, UsageError
from .graph import Graph
from .metrics import accuracy, pseudo_label_accuracy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 0.5
    delta: float = 10.0
    threshold: float = 0.7
    pseudo_weight: float = 0.5
    lr: float = 0.01
    lr_min: float = 0.0
    max_epochs: int = 200
    patience: int = 50
    seed: int = 0
    self_training: bool = True
    use_tns: bool = True
    use_tc: bool = True
    use_ec: bool = True

    def __post_init__(self):
        checks = [
            ("alpha", 0.0 < self.alpha < 1.0, "must lie in (0, 1)"),
            ("delta", self.delta > 0, "must be > 0"),
            ("threshold", 0.0 < self.threshold < 1.0, "must lie in (0, 1)"),
            ("pseudo_weight", self.pseudo_weight >= 0, "must be >= 0"),
            ("lr", self.lr > 0, "must be > 0"),
            ("lr_min", 0 <= self.lr_min <= self.lr, "must lie in [0, lr]"),
            ("max_epochs", self.max_epochs >= 1, "must be >= 1"),
            ("patience", self.patience >= 1, "must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise UsageError(f"{name}: {msg}")


@dataclass
class PseudoState:
    """Pseudo-labeled nodes of one epoch."""

    nodes: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray  # evaluating confidence p_i of each member
    tc: float

    @classmethod
    def empty(cls, tc: float = 0.0) -> "PseudoState":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), tc)

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("-inf")


def select_training_nodes(labeled, alpha: float, rng: np.random.Generator):
    """Randomly split the labeled nodes into ``floor(alpha*|L|)`` prediction
    targets and the remaining label-connected nodes."""
    labeled = np.unique(np.asarray(labeled, dtype=np.int64))
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"selection rate must lie in (0, 1), got {alpha}")
    n = int(math.floor(alpha * len(labeled)))
    if n == 0 or n == len(labeled):
        raise DegenerateSplitError(
            f"selecting {n} of {len(labeled)} labeled nodes leaves an empty side"
        )
    perm = rng.permutation(len(labeled))
    return np.sort(labeled[perm[:n]]), np.sort(labeled[perm[n:]])


def training_confidence(epoch: int, delta: float) -> float:
    """sigmoid(log(epoch / delta)), which simplifies to epoch / (epoch + delta)."""
    if epoch < 1:
        raise ContractError("epoch counter starts at 1")
    if delta <= 0:
        raise ContractError("delta must be > 0")
    return epoch / (epoch + delta)


def gate_pseudo_labels(probs, unlabeled, tc: float, threshold: float) -> PseudoState:
    """Keep unlabeled nodes whose max probability times ``tc`` exceeds ``threshold``.

    Ties in the argmax resolve to the lowest class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    unlabeled = np.asarray(unlabeled, dtype=np.int64)
    if len(unlabeled) == 0:
        return PseudoState.empty(tc)
    rows = probs[unlabeled]
    p = rows.max(axis=1)
    keep = p * tc > threshold
    return PseudoState(unlabeled[keep], rows[keep].argmax(axis=1), p[keep], tc)


def cross_entropy(y_true, y_prob) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_prob = np.asarray(y_prob, dtype=np.float64)
    return float(-np.sum(y_true * np.log(np.maximum(y_prob, ad.LOG_CLAMP))))


def composite_loss(targets, probs: Tensor, labels, pseudo: PseudoState | None, weight: float) -> Tensor:
    """Mean cross-entropy over ``targets`` plus the confidence-weighted
    pseudo-label term ``weight * TC / |U'| * sum_i EC_i * CE_i``.

    TC and EC_i enter as constants.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        raise ContractError("composite loss needs at least one target node")
    labels = np.asarray(labels, dtype=np.int64)
    n = len(targets)
    loss = ad.weighted_nll(probs, targets, labels[targets], np.full(n, 1.0 / n))
    if pseudo is not None and len(pseudo) and weight > 0:
        w = weight * pseudo.tc * np.asarray(pseudo.confidences) / len(pseudo)
        loss = ad.add(loss, ad.weighted_nll(probs, pseudo.nodes, pseudo.labels, w))
    return loss


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingAborted(f"non-finite gradient for {name} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.setdefault(name, np.zeros(p.shape))
        v = state.v.setdefault(name, np.zeros(p.shape))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def cosine_lr(epoch: float, max_epochs: float, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= epoch <= max_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {max_epochs}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * epoch / max_epochs))


def infer_output(g: Graph, label_feats, params: ModelParams, config: BackboneConfig, connected=None) -> ForwardOutput:
    """Eval-mode forward with every training node label-connected (or visible)."""
    if connected is None:
        connected = g.train
    return forward(g, label_feats, connected, params, config, mode="eval")


def infer(g: Graph, label_feats, params: ModelParams, config: BackboneConfig) -> np.ndarray:
    """Predicted probabilities (M x C) from the inference-mode graph; rows of
    unlabeled nodes are the predictions of interest."""
    return infer_output(g, label_feats, params, config).probs.data


def _epoch_split(method: str, labeled: np.ndarray, config: TrainConfig, rng):
    if method == "vanilla":
        return labeled, np.zeros(0, dtype=np.int64)
    if not config.use_tns:
        return labeled, labeled
    return select_training_nodes(labeled, config.alpha, rng)


def train(
    g: Graph,
    label_feats,
    params: ModelParams,
    backbone: BackboneConfig,
    config: TrainConfig,
) -> TrainResult:
    """Train ``params`` in place; the returned result holds a copy of the
    parameters with the best validation accuracy."""
    if len(g.valid) == 0:
        raise ContractError("training needs a nonempty validation split")
    labeled = g.train
    if len(labeled) == 0:
        raise ContractError("training needs labeled training nodes")
    unlabeled = np.setdiff1d(np.arange(g.num_nodes), labeled)
    split_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(2)
    split_rng = np.random.default_rng(split_seq)
    drop_rng = np.random.default_rng(drop_seq)
    labels = g.labels
    state = AdamState()
    best = TrainResult(params.copy())
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        lr = cosine_lr(epoch - 1, config.max_epochs, config.lr, config.lr_min)
        targets, connected = _epoch_split(backbone.method, labeled, config, split_rng)
        if len(np.intersect1d(targets, connected)) and config.use_tns and backbone.method != "vanilla":
            raise AssertionError("target leakage: a prediction target is label-connected")
        with Tape() as tape:
            out = forward(g, label_feats, connected, params, backbone, mode="train", rng=drop_rng)
            pseudo = PseudoState.empty()
            if config.self_training:
                tc = training_confidence(epoch, config.delta) if config.use_tc else 1.0
                pseudo = gate_pseudo_labels(out.probs.data, unlabeled, tc, config.threshold)
                if not config.use_ec:
                    pseudo.confidences = np.ones(len(pseudo))
            loss = composite_loss(targets, out.probs, labels, pseudo, config.pseudo_weight)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}")
            for p in params:
                p.grad = None
            ad.backward(loss, tape)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        adam_step(params.tensors, grads, state, lr)

        train_acc = accuracy(out.probs.data[targets].argmax(axis=1), labels[targets])
        val_probs = infer(g, label_feats, params, backbone)
        val_acc = accuracy(val_probs[g.valid].argmax(axis=1), labels[g.valid])
        pseudo_acc = None
        if len(pseudo):
            rep = pseudo_label_accuracy(pseudo.nodes, pseudo.labels, pseudo.confidences, labels)
            pseudo_acc = rep.accuracy if rep is not None else None
        best.history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss": loss_value,
                "train_acc": train_acc,
                "val_acc": val_acc,
                "num_pseudo": len(pseudo),
                "tc": pseudo.tc if config.self_training else None,
                "pseudo_acc": pseudo_acc,
            }
        )
        if val_acc > best.best_val_acc:
            best.best_val_acc = val_acc
            best.best_epoch = epoch
            best.params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.debug("early stop at epoch %d (best %d)", epoch, best.best_epoch)
                break
    return best


def config_dict(config) -> dict:
    return asdict(config)
