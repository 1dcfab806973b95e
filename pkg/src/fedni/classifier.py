"""GCN node classifier, its cross-entropy loss, and evaluation metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .graphcons import PopulationGraph
from .numerics import GraphConv, Linear, Module, Tensor

logger = logging.getLogger(__name__)

PROB_CLIP = 1e-7
METRIC_NAMES = ("accuracy", "auc", "precision", "recall", "f1")


class ClassifierState(Module):
    """G-conv(D, 64) + ELU -> G-conv(64, 32) -> FC(32, 2)."""

    def __init__(self, in_dim: int, rng: np.random.Generator, hidden=(64, 32)):
        self.in_dim = in_dim
        self.gc1 = GraphConv(in_dim, hidden[0], rng)
        self.gc2 = GraphConv(hidden[0], hidden[1], rng)
        self.fc = Linear(hidden[1], 2, rng)

    def logits(self, X: np.ndarray, A_norm: np.ndarray) -> Tensor:
        if X.shape[1] != self.in_dim:
            raise nx.DimensionError(f"classifier trained for D={self.in_dim}, graph has D={X.shape[1]}")
        h = self.gc1(Tensor(X), A_norm, "elu")
        h = self.gc2(h, A_norm)
        return self.fc(h)


def classifier_forward(G: PopulationGraph, clf: ClassifierState) -> Tensor:
    """Per-node softmax probabilities (n x 2) for real and generated nodes alike."""
    return nx.softmax(clf.logits(G.X, G.A_norm))


def ce_loss(probs: Tensor, y: np.ndarray, mask: np.ndarray) -> Tensor:
    """Summed binary cross-entropy over the masked nodes on the class-1 probability."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("loss mask selects no labeled training nodes")
    p = nx.clip(nx.take_rows(nx.column(probs, 1), idx), PROB_CLIP, 1.0 - PROB_CLIP)
    t = np.asarray(y, dtype=np.float64)[idx]
    ll = nx.log(p) * t + nx.log(1.0 - p) * (1.0 - t)
    return -nx.sum(ll)


def auc_score(scores: np.ndarray, y: np.ndarray) -> float | None:
    """Mann-Whitney AUC with average ranks for ties; None for a single-class set."""
    y = np.asarray(y).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    accuracy: float
    auc: float | None
    precision: float
    recall: float
    f1: float
    n: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_metrics(probs: np.ndarray, y: np.ndarray, test_mask: np.ndarray) -> MetricsReport:
    """Threshold-0.5 metrics (ties go to class 0) plus rank AUC on the positive-class probability."""
    probs = np.asarray(probs)
    p1 = probs[:, 1] if probs.ndim == 2 else probs
    idx = np.flatnonzero(test_mask)
    if idx.size == 0:
        raise ValueError("empty test mask")
    s, t = p1[idx], np.asarray(y)[idx].astype(int)
    pred = (s > 0.5).astype(int)
    tp = int(((pred == 1) & (t == 1)).sum())
    fp = int(((pred == 1) & (t == 0)).sum())
    fn = int(((pred == 0) & (t == 1)).sum())
    acc = float((pred == t).mean())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    auc = auc_score(s, t)
    if auc is None:
        logger.warning("single-class test set; AUC undefined")
    return MetricsReport(acc, auc, precision, recall, f1, int(idx.size))


def aggregate_reports(reports: list[MetricsReport]) -> dict[str, dict[str, float]]:
    """Mean and sample std per metric; absent AUCs are dropped."""
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not vals:
            out[name] = {"mean": math.nan, "std": math.nan, "count": 0}
            continue
        arr = np.array(vals, dtype=np.float64)
        out[name] = {"mean": float(arr.mean()),
                     "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                     "count": len(arr)}
    return out


def train_local(G: PopulationGraph, clf: ClassifierState, train_mask: np.ndarray, epochs: int,
                lr: float, optimizer: str = "adam") -> list[float]:
    """Full-batch training on one graph; returns the per-epoch loss."""
    step = nx.adam_step if optimizer == "adam" else nx.sgd_step
    params = clf.params()
    losses = []
    for _ in range(epochs):
        loss = ce_loss(classifier_forward(G, clf), G.y, train_mask)
        loss.backward()
        step(params, lr)
        losses.append(float(loss.value))
    return losses
