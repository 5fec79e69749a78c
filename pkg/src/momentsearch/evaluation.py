"""Retrieval metrics: recall at K over IoU thresholds, median rank, the
oracle upper bound, and the multi-judgment consensus criteria.

Metrics consume plain (video_id, span) predictions, so they work directly
on results files without touching feature data.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .core import GroundTruth, TemporalSpan, temporal_iou
from .dataio import Corpus
from .enumeration import EnumConfig, enumerate_moments

EXACT_MATCH_IOU = 1.0 - 1e-9


@dataclass(frozen=True)
class Prediction:
    video_id: str
    span: TemporalSpan
    cost: float = 0.0


def _judgments_met(pred: Prediction, gt: GroundTruth, iou_thr: float, min_judgments: int) -> bool:
    if pred.video_id != gt.video_id:
        return False
    hits = sum(1 for a in gt.annotations if temporal_iou(pred.span, a) >= iou_thr)
    return hits >= min_judgments


def query_hit(
    ranked: Sequence[Prediction],
    gt: GroundTruth,
    k: int,
    iou_thr: float,
    min_judgments: int = 1,
) -> int:
    """1 iff a top-k prediction overlaps enough annotations at the threshold."""
    if min_judgments < 1:
        raise ValueError("min_judgments must be at least 1")
    for pred in ranked[:k]:
        if _judgments_met(pred, gt, iou_thr, min_judgments):
            return 1
    return 0


def first_correct_rank(
    ranked: Sequence[Prediction],
    gt: GroundTruth,
    iou_thr: float,
    min_judgments: int,
    universe: int,
) -> int:
    """1-based rank of the first correct prediction; universe+1 when absent."""
    for rank, pred in enumerate(ranked, start=1):
        if _judgments_met(pred, gt, iou_thr, min_judgments):
            return rank
    return universe + 1


def recall_at_k(
    results: dict[str, Sequence[Prediction]],
    ground_truths: dict[str, GroundTruth],
    k: int,
    iou_thr: float,
    min_judgments: int = 1,
) -> float:
    if not results:
        raise ValueError("no results to evaluate")
    hits = []
    for query_id, ranked in results.items():
        if query_id not in ground_truths:
            raise KeyError(f"no ground truth for query {query_id!r}")
        hits.append(query_hit(ranked, ground_truths[query_id], k, iou_thr, min_judgments))
    return float(np.mean(hits))


def median_rank(
    results: dict[str, Sequence[Prediction]],
    ground_truths: dict[str, GroundTruth],
    iou_thr: float,
    min_judgments: int,
    universe: int,
    declared_top_k: Optional[int] = None,
) -> float:
    """Median over queries of the first correct rank.

    Defined only for exhaustive runs: the ranked lists must have been
    allowed to cover the whole candidate universe.
    """
    if declared_top_k is not None and declared_top_k < universe:
        raise ValueError(
            f"median rank needs exhaustive rankings: top_k={declared_top_k} < universe={universe}"
        )
    ranks = sorted(
        first_correct_rank(ranked, ground_truths[qid], iou_thr, min_judgments, universe)
        for qid, ranked in results.items()
    )
    n = len(ranks)
    if n == 0:
        raise ValueError("no results to evaluate")
    mid = n // 2
    if n % 2 == 1:
        return float(ranks[mid])
    return (ranks[mid - 1] + ranks[mid]) / 2.0


def oracle_recall(
    corpus: Corpus,
    ground_truths: dict[str, GroundTruth],
    enum_cfg: EnumConfig,
    iou_thr: float,
    min_judgments: int = 1,
) -> float:
    """Best achievable recall: some candidate in the right video qualifies."""
    cache: dict[str, list] = {}
    hits = []
    for gt in ground_truths.values():
        if gt.video_id not in cache:
            cache[gt.video_id] = enumerate_moments(corpus.video(gt.video_id), enum_cfg)
        ok = any(
            sum(1 for a in gt.annotations if temporal_iou(m.span, a) >= iou_thr) >= min_judgments
            for m in cache[gt.video_id]
        )
        hits.append(1 if ok else 0)
    if not hits:
        raise ValueError("no ground truths to evaluate")
    return float(np.mean(hits))


# ---------------------------------------------------------------------------
# Consensus criteria over annotation triads
# ---------------------------------------------------------------------------


def consensus_rank(ranked: Sequence[Prediction], annotations: Sequence[TemporalSpan]) -> float:
    """Best mean rank over annotation triads, with exact-match ranks.

    Each annotation's rank is the position of the prediction matching it at
    IoU 1; predictions must cover the video's candidate set.
    """
    if len(annotations) < 3:
        raise ValueError("consensus rank needs at least three annotations")
    ranks = []
    for a in annotations:
        rank = next(
            (r for r, p in enumerate(ranked, start=1)
             if temporal_iou(p.span, a) >= EXACT_MATCH_IOU),
            None,
        )
        if rank is None:
            raise ValueError(f"no prediction matches annotation [{a.start}, {a.end}] exactly")
        ranks.append(rank)
    return min(sum(triad) / 3.0 for triad in combinations(ranks, 3))


def consensus_miou(top1: Prediction, annotations: Sequence[TemporalSpan]) -> float:
    """Best mean IoU of the top-1 prediction over annotation triads."""
    if len(annotations) < 3:
        raise ValueError("consensus mIoU needs at least three annotations")
    ious = [temporal_iou(top1.span, a) for a in annotations]
    return max(sum(triad) / 3.0 for triad in combinations(ious, 3))


# ---------------------------------------------------------------------------
# Aggregated reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    recalls: dict[tuple[int, float], float]
    median_ranks: dict[float, float] = field(default_factory=dict)
    oracle: dict[float, float] = field(default_factory=dict)
    query_count: int = 0
    config: dict = field(default_factory=dict)

    def validate(self) -> None:
        """Recalls must grow with K and shrink with the IoU threshold."""
        ks = sorted({k for k, _ in self.recalls})
        ious = sorted({t for _, t in self.recalls})
        for iou in ious:
            values = [self.recalls[(k, iou)] for k in ks if (k, iou) in self.recalls]
            if any(a > b + 1e-12 for a, b in zip(values, values[1:])):
                raise AssertionError(f"recall not monotone in K at IoU {iou}")
        for k in ks:
            values = [self.recalls[(k, iou)] for iou in ious if (k, iou) in self.recalls]
            if any(a < b - 1e-12 for a, b in zip(values, values[1:])):
                raise AssertionError(f"recall not monotone in IoU at K={k}")

    def to_kv(self) -> dict[str, str]:
        items: dict[str, str] = {"query_count": str(self.query_count)}
        for (k, iou), value in sorted(self.recalls.items()):
            items[f"recall@{k}_iou{iou:.2f}"] = f"{value:.6f}"
        for iou, value in sorted(self.median_ranks.items()):
            items[f"median_rank_iou{iou:.2f}"] = f"{value:.1f}"
        for iou, value in sorted(self.oracle.items()):
            items[f"oracle_recall_iou{iou:.2f}"] = f"{value:.6f}"
        for key, value in sorted(self.config.items()):
            items[f"config.{key}"] = str(value)
        return items


def build_report(
    results: dict[str, Sequence[Prediction]],
    ground_truths: dict[str, GroundTruth],
    ks: Sequence[int] = (1, 10, 100),
    ious: Sequence[float] = (0.5, 0.7),
    min_judgments: int = 1,
    universe: Optional[int] = None,
    declared_top_k: Optional[int] = None,
    corpus: Optional[Corpus] = None,
    enum_cfg: Optional[EnumConfig] = None,
    config: Optional[dict] = None,
    workers: int = 1,
) -> MetricsReport:
    """Assemble the full metrics table from per-query first-correct ranks.

    Median rank and the oracle bound are included only when their inputs
    (full-universe rankings / the corpus) are available. Per-query work may
    run on a thread pool; aggregation follows query order, so reports are
    identical for any worker count.
    """
    if not results:
        raise ValueError("no results to evaluate")
    report = MetricsReport(recalls={}, query_count=len(results), config=dict(config or {}))
    qids = list(results.keys())
    # Rank cap: large enough that an absent correct moment misses every k.
    cap = universe if universe is not None else max(
        max(ks), max(len(r) for r in results.values())
    )

    def ranks_for(qid: str) -> list[int]:
        return [
            first_correct_rank(results[qid], ground_truths[qid], iou, min_judgments, cap)
            for iou in ious
        ]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_query = list(pool.map(ranks_for, qids))
    else:
        per_query = [ranks_for(qid) for qid in qids]
    rank_table = np.asarray(per_query, dtype=np.int64)  # (queries, ious)

    exhaustive = (universe is not None and declared_top_k is not None
                  and declared_top_k >= universe)
    for col, iou in enumerate(ious):
        ranks = rank_table[:, col]
        for k in ks:
            report.recalls[(k, iou)] = float(np.mean(ranks <= k))
        if exhaustive:
            ordered = np.sort(ranks)
            n = ordered.shape[0]
            mid = n // 2
            report.median_ranks[iou] = (
                float(ordered[mid]) if n % 2 == 1
                else (float(ordered[mid - 1]) + float(ordered[mid])) / 2.0
            )
        if corpus is not None and enum_cfg is not None:
            report.oracle[iou] = oracle_recall(corpus, ground_truths, enum_cfg, iou, min_judgments)
    report.validate()
    return report


def single_video_eval(
    results: dict[str, Sequence[Prediction]],
    ground_truths: dict[str, GroundTruth],
    ks: Sequence[int] = (1, 5),
    ious: Sequence[float] = (0.5, 0.7),
    min_judgments: int = 1,
    config: Optional[dict] = None,
) -> MetricsReport:
    """Recall over per-video rankings (each query scored in its own video)."""
    for qid, ranked in results.items():
        gt = ground_truths[qid]
        for pred in ranked:
            if pred.video_id != gt.video_id:
                raise ValueError(
                    f"{qid}: prediction in {pred.video_id} but single-video mode "
                    f"requires {gt.video_id}"
                )
    return build_report(results, ground_truths, ks=ks, ious=ious,
                        min_judgments=min_judgments, config=config)
