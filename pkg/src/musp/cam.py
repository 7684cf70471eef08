"""Co-occurrence weighted distance between two embedded vehicles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import ShapeError


@dataclass
class EmbeddingRecord:
    identity: str
    parts: np.ndarray  # (n-1, c)
    global_vec: np.ndarray  # (g,)
    area_ratios: np.ndarray  # (n-1,)
    camera: str | None = None

    def __post_init__(self):
        self.parts = np.atleast_2d(np.asarray(self.parts, dtype=np.float64))
        self.global_vec = np.asarray(self.global_vec, dtype=np.float64)
        self.area_ratios = np.asarray(self.area_ratios, dtype=np.float64)
        if self.parts.shape[0] != len(self.area_ratios):
            raise ShapeError(f"{self.parts.shape[0]} part vectors but {len(self.area_ratios)} area ratios")
        if np.any(self.area_ratios < 0) or np.any(self.area_ratios > 1):
            raise ValueError(f"area ratios must lie in [0, 1], got {self.area_ratios}")


def _check(a: EmbeddingRecord, b: EmbeddingRecord) -> None:
    if a.parts.shape != b.parts.shape or a.global_vec.shape != b.global_vec.shape:
        raise ShapeError(
            f"records differ in shape: parts {a.parts.shape} vs {b.parts.shape}, "
            f"global {a.global_vec.shape} vs {b.global_vec.shape}"
        )


def cam_weights(a: EmbeddingRecord, b: EmbeddingRecord) -> np.ndarray:
    """Normalized products of area ratios; uniform when every product is zero."""
    _check(a, b)
    co = a.area_ratios * b.area_ratios
    total = co.sum()
    if total <= 0:
        return np.full(len(co), 1.0 / len(co)) if len(co) else co
    return co / total


def pair_distance(a: EmbeddingRecord, b: EmbeddingRecord) -> float:
    """Weighted part distances plus the global distance weighted by 1/(n-1).

    With no parts (the average-pooling baseline) this is plain Euclidean distance.
    """
    w = cam_weights(a, b)
    glob = np.sqrt(np.sum((a.global_vec - b.global_vec) ** 2))
    if len(w) == 0:
        return float(glob)
    part = np.sqrt(np.sum((a.parts - b.parts) ** 2, axis=-1))
    return float(np.sum(w * part) + glob / len(w))


def distance_matrix(queries: Sequence[EmbeddingRecord], gallery: Sequence[EmbeddingRecord]) -> np.ndarray:
    """Row-by-row batch form of :func:`pair_distance`."""
    out = np.zeros((len(queries), len(gallery)))
    if not len(queries) or not len(gallery):
        return out
    g_parts = np.stack([g.parts for g in gallery])
    g_glob = np.stack([g.global_vec for g in gallery])
    g_ratio = np.stack([g.area_ratios for g in gallery])
    if any(g.parts.shape != g_parts.shape[1:] for g in gallery):
        raise ShapeError("gallery records differ in shape")
    k = g_parts.shape[1]
    for i, q in enumerate(queries):
        if q.parts.shape != g_parts.shape[1:] or q.global_vec.shape != g_glob.shape[1:]:
            raise ShapeError(f"query {i} shape differs from gallery records")
        glob = np.sqrt(np.sum((q.global_vec - g_glob) ** 2, axis=-1))
        if k == 0:
            out[i] = glob
            continue
        co = q.area_ratios * g_ratio
        total = co.sum(axis=-1, keepdims=True)
        w = np.where(total > 0, co / np.where(total > 0, total, 1.0), 1.0 / k)
        part = np.sqrt(np.sum((q.parts - g_parts) ** 2, axis=-1))
        out[i] = np.sum(w * part, axis=-1) + glob / k
    return out
