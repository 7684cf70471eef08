"""CMC@k and mean average precision over a query/gallery split."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class RankingResult:
    order: list[np.ndarray]  # per query: kept gallery indices by ascending distance
    matches: list[np.ndarray]  # per query: relevance flag of each ranked item
    excluded: int  # queries without any relevant gallery item


def rank_gallery(
    distances: np.ndarray,
    query_ids,
    gallery_ids,
    query_cams=None,
    gallery_cams=None,
    exclude: np.ndarray | None = None,
) -> RankingResult:
    """Rank the gallery per query; ties fall back to ascending gallery index.

    Gallery items sharing both identity and camera with the query are dropped
    when cameras are given; ``exclude`` is an optional (Q, G) mask of further
    items to drop (e.g. the query itself when query and gallery coincide).
    """
    distances = np.asarray(distances, dtype=np.float64)
    q_ids, g_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    order, matches, excluded = [], [], 0
    for qi in range(distances.shape[0]):
        keep = np.ones(distances.shape[1], dtype=bool)
        if query_cams is not None and gallery_cams is not None:
            keep &= ~((g_ids == q_ids[qi]) & (np.asarray(gallery_cams) == query_cams[qi]))
        if exclude is not None:
            keep &= ~exclude[qi]
        idx = np.flatnonzero(keep)
        ranked = idx[np.argsort(distances[qi, idx], kind="stable")]
        rel = g_ids[ranked] == q_ids[qi]
        if not rel.any():
            excluded += 1
            continue
        order.append(ranked)
        matches.append(rel)
    if excluded:
        warnings.warn(f"{excluded} queries have no relevant gallery item and were excluded")
    return RankingResult(order, matches, excluded)


def _cmc(result: RankingResult, k: int) -> float:
    if not result.matches:
        return 0.0
    return float(np.mean([m[:k].any() for m in result.matches]))


def _ap(rel: np.ndarray) -> float:
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float(np.sum((hits / ranks)[rel]) / rel.sum())


def cmc_at_k(distances, query_ids, gallery_ids, k: int, query_cams=None, gallery_cams=None, exclude=None) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return _cmc(rank_gallery(distances, query_ids, gallery_ids, query_cams, gallery_cams, exclude), k)


def mean_average_precision(distances, query_ids, gallery_ids, query_cams=None, gallery_cams=None, exclude=None) -> float:
    result = rank_gallery(distances, query_ids, gallery_ids, query_cams, gallery_cams, exclude)
    if not result.matches:
        return 0.0
    return float(np.mean([_ap(m) for m in result.matches]))


@dataclass
class RetrievalReport:
    mAP: float
    cmc1: float
    cmc5: float
    num_query: int
    num_gallery: int
    excluded: int

    def as_text(self) -> str:
        return "\n".join(
            [
                f"mAP {self.mAP:.6f}",
                f"CMC@1 {self.cmc1:.6f}",
                f"CMC@5 {self.cmc5:.6f}",
                f"queries {self.num_query}",
                f"gallery {self.num_gallery}",
                f"excluded_queries {self.excluded}",
            ]
        ) + "\n"


def evaluate(distances, query_ids, gallery_ids, query_cams=None, gallery_cams=None, exclude=None) -> RetrievalReport:
    """Rank once and report mAP, CMC@1 and CMC@5."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = rank_gallery(distances, query_ids, gallery_ids, query_cams, gallery_cams, exclude)
    aps = [_ap(m) for m in result.matches]
    return RetrievalReport(
        mAP=float(np.mean(aps)) if aps else 0.0,
        cmc1=_cmc(result, 1),
        cmc5=_cmc(result, 5),
        num_query=int(np.shape(distances)[0]),
        num_gallery=int(np.shape(distances)[1]),
        excluded=result.excluded,
    )
