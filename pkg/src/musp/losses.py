"""Identity cross-entropy, batch-hard triplet and spatial diversity losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor
from .functional import ConfigError
from .nn import BatchNorm, Linear, Module


class ClassifierHead(Module):
    """BN neck followed by a bias-free linear classifier."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.neck = self.add_child("bn", BatchNorm(dim))
        self.fc = self.add_child("fc", Linear(dim, num_classes, rng, bias=False))

    def __call__(self, features: Tensor) -> Tensor:
        return self.fc(self.neck(features))


@dataclass(frozen=True)
class BatchComposition:
    P: int
    Q: int
    labels: tuple[int, ...]

    @classmethod
    def from_labels(cls, labels) -> BatchComposition:
        labels = tuple(int(x) for x in labels)
        ids, counts = np.unique(labels, return_counts=True)
        if len(ids) == 0 or np.any(counts != counts[0]):
            raise ConfigError("batch: every identity must appear the same number of times")
        return cls(P=len(ids), Q=int(counts[0]), labels=labels)

    def __post_init__(self):
        if len(self.labels) != self.P * self.Q:
            raise ConfigError(f"batch: {len(self.labels)} labels != P*Q = {self.P * self.Q}")


def smoothed_targets(labels: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    if num_classes < 2:
        raise ConfigError("id loss: need at least 2 classes")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError("id loss: smoothing must lie in [0, 1)")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"id loss: labels must lie in [0, {num_classes}), got {labels.tolist()}")
    t = np.full((len(labels), num_classes), smoothing / (num_classes - 1))
    t[np.arange(len(labels)), labels] = 1.0 - smoothing
    return t


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Batch-mean cross-entropy of one head against (optionally smoothed) targets."""
    k, num_classes = logits.shape
    targets = smoothed_targets(labels, num_classes, smoothing)
    return -(F.log_softmax(logits, axis=-1) * targets).sum() * (1.0 / k)


def id_loss(
    features: Sequence[Tensor],
    heads: Sequence[ClassifierHead],
    labels,
    smoothing: float = 0.1,
) -> Tensor:
    """Sum over supervised features of the batch-mean smoothed cross-entropy."""
    if len(features) != len(heads):
        raise ConfigError(f"id loss: {len(features)} features but {len(heads)} heads")
    total = None
    for feat, head in zip(features, heads):
        term = cross_entropy(head(feat), labels, smoothing)
        total = term if total is None else total + term
    return total


def hardest_pairs(dist: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor: index of the farthest positive (excluding itself) and nearest negative."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(len(labels), dtype=bool)
    pos = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    neg = np.where(~same, dist, np.inf).argmin(axis=1)
    return pos, neg


def triplet_loss(features: Sequence[Tensor], batch: BatchComposition, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss, summed over feature sets and anchors."""
    if batch.P < 2 or batch.Q < 2:
        raise ConfigError(f"triplet loss: need P >= 2 and Q >= 2, got P={batch.P}, Q={batch.Q}")
    anchors = np.arange(len(batch.labels))
    total = None
    for feat in features:
        dist = F.pairwise_distance(feat)
        pos, neg = hardest_pairs(dist.data, batch.labels)
        hinge = F.relu(dist[anchors, pos] - dist[anchors, neg] + margin).sum()
        total = hinge if total is None else total + hinge
    return total


def diversity_loss(attention: Tensor) -> Tensor:
    """Sum over images and locations of the product of the n-1 retained weights."""
    n = attention.shape[-1]
    prod = attention[..., 0]
    for i in range(1, n - 1):
        prod = prod * attention[..., i]
    return prod.sum()


def total_loss(id_term: Tensor, tri_term: Tensor, div_term: Tensor) -> Tensor:
    return id_term + tri_term + div_term
