"""End-to-end query answering.

Three paths produce a ranked list of moments for a query:

* exhaustive: score every enumerated moment of every video, suppress
  near-duplicates per video, merge.
* two-stage (moment budget): rank all moments with the cheap stage-one
  model, keep the top `budget`, re-score those with the re-ranking model.
* approximate (clip budget): retrieve the top clips from the index, then
  re-score all moments of the touched videos that contain a retrieved
  clip.

Non-minimum suppression runs only at the final ranking stage. All merges
apply the deterministic (cost, video_id, first_clip, last_clip) tie-break,
so rankings are reproducible across runs and worker counts.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Moment, Query, temporal_iou
from .costs import CostCounters, ScoredMoment, score_moments
from .dataio import Corpus, stable_u32
from .enumeration import EnumConfig, enumerate_moments
from .index import ClipIndex, IvfIndex
from .model import ModelParams, embed_query

log = logging.getLogger(__name__)

BASELINES = ("chance", "moment_prior", "tef_only")


@dataclass
class RetrievalConfig:
    variant: str = "cal"
    rerank_variant: Optional[str] = None
    budget: int = 200  # moments kept from stage one
    clip_budget: int = 200  # clips retrieved in approximate mode
    nms_iou: float = 1.0
    top_k: int = 100
    nprobe: int = 8
    dilation_clips: int = 0  # widen clip containment in approximate mode

    def __post_init__(self):
        if not 0 < self.nms_iou <= 1:
            raise ValueError("nms_iou must lie in (0, 1]")
        if self.budget < self.top_k:
            raise ValueError("stage-one budget must be at least top_k")
        if self.clip_budget < 1 or self.top_k < 1:
            raise ValueError("clip_budget and top_k must be positive")


@dataclass
class RankedResult:
    query_id: str
    ranked: list[ScoredMoment]
    stage_counters: dict[str, int] = field(default_factory=dict)


def nms(scored: list[ScoredMoment], iou_threshold: float) -> list[ScoredMoment]:
    """Greedy suppression within one video, cheapest first.

    A moment is dropped iff its IoU with an already-retained cheaper moment
    exceeds the threshold; order among the retained is preserved.
    """
    retained: list[ScoredMoment] = []
    for s in scored:
        if all(temporal_iou(s.moment.span, r.moment.span) <= iou_threshold for r in retained):
            retained.append(s)
    return retained


def _rank_within_video(scored: list[ScoredMoment]) -> list[ScoredMoment]:
    return sorted(scored, key=lambda s: (s.cost, s.moment.first_clip, s.moment.last_clip))


def _merge(per_video: list[list[ScoredMoment]], top_k: int) -> list[ScoredMoment]:
    merged = [s for block in per_video for s in block]
    merged.sort(key=lambda s: s.sort_key)
    return merged[:top_k]


def _check_variant(variant: str, params: ModelParams) -> None:
    wants_tef = variant.endswith("_tef")
    if wants_tef != params.dims.use_tef:
        raise ValueError(
            f"variant {variant!r} is incompatible with a model where use_tef="
            f"{params.dims.use_tef}"
        )


def exhaustive_search(
    corpus: Corpus,
    query: Query,
    params: ModelParams,
    enum_cfg: EnumConfig,
    cfg: RetrievalConfig,
) -> RankedResult:
    """Score the full candidate universe with one model."""
    _check_variant(cfg.variant, params)
    q_emb = embed_query(query.word_vectors, params)
    counters = CostCounters()
    per_video = []
    for video in corpus.videos:
        scored = score_moments(
            video, corpus.features_for(video.video_id), q_emb,
            cfg.variant, params, enumerate_moments(video, enum_cfg), counters,
        )
        if scored:
            per_video.append(nms(_rank_within_video(scored), cfg.nms_iou))
    ranked = _merge(per_video, cfg.top_k)
    return RankedResult(query.query_id, ranked, {
        "stage1_distances": counters.distance_evals,
        "stage1_moments": counters.moments_scored,
    })


def two_stage_search(
    corpus: Corpus,
    index: Optional[ClipIndex],
    query: Query,
    stage1_params: ModelParams,
    rerank_params: Optional[ModelParams],
    enum_cfg: EnumConfig,
    cfg: RetrievalConfig,
    mode: str = "approx",
) -> RankedResult:
    """Retrieve-then-re-rank; `mode` picks the stage-one currency.

    "approx" retrieves `clip_budget` clips from the index and forms the
    candidate set from moments containing a retrieved clip; "moment" keeps
    the `budget` cheapest moments under the stage-one cost. Stage two
    re-scores candidates with the re-ranking model (the stage-one model
    when none is given), applies per-video suppression, and merges.
    """
    if mode not in ("approx", "moment"):
        raise ValueError(f"unknown two-stage mode {mode!r}")
    rerank_params = rerank_params if rerank_params is not None else stage1_params
    rerank_variant = cfg.rerank_variant or cfg.variant
    _check_variant(rerank_variant, rerank_params)
    counters: dict[str, int] = {}

    if mode == "approx":
        if index is None:
            raise ValueError("approximate mode needs a clip index")
        q1 = embed_query(query.word_vectors, stage1_params)
        if isinstance(index, IvfIndex):
            nprobe = min(cfg.nprobe, index.num_partitions)
            hits, stats = index.search(q1, top_c=cfg.clip_budget, nprobe=nprobe)
            counters["stage1_centroid_distances"] = stats.centroid_evals
            counters["stage1_partitions_probed"] = stats.partitions_probed
        else:
            hits, stats = index.search(q1, top_c=cfg.clip_budget)
        counters["stage1_distances"] = stats.distance_evals
        if not hits:
            log.warning("%s: empty stage-one retrieval", query.query_id)
            return RankedResult(query.query_id, [], counters)
        retrieved: dict[str, set[int]] = {}
        for h in hits:
            retrieved.setdefault(h.video_id, set()).add(h.clip_idx)
        d = cfg.dilation_clips
        candidates: dict[str, list[Moment]] = {}
        for video in corpus.videos:
            clips = retrieved.get(video.video_id)
            if not clips:
                continue
            kept = [
                m for m in enumerate_moments(video, enum_cfg)
                if any(m.first_clip - d <= k <= m.last_clip + d for k in clips)
            ]
            if kept:
                candidates[video.video_id] = kept
    else:
        _check_variant(cfg.variant, stage1_params)
        q1 = embed_query(query.word_vectors, stage1_params)
        stage1_counters = CostCounters()
        scored_all: list[ScoredMoment] = []
        for video in corpus.videos:
            scored_all.extend(score_moments(
                video, corpus.features_for(video.video_id), q1,
                cfg.variant, stage1_params, enumerate_moments(video, enum_cfg),
                stage1_counters,
            ))
        counters["stage1_distances"] = stage1_counters.distance_evals
        counters["stage1_moments"] = stage1_counters.moments_scored
        scored_all.sort(key=lambda s: s.sort_key)
        candidates = {}
        for s in scored_all[:cfg.budget]:
            candidates.setdefault(s.moment.video_id, []).append(s.moment)

    q2 = embed_query(query.word_vectors, rerank_params)
    stage2_counters = CostCounters()
    per_video = []
    for video in corpus.videos:
        kept = candidates.get(video.video_id)
        if not kept:
            continue
        scored = score_moments(
            video, corpus.features_for(video.video_id), q2,
            rerank_variant, rerank_params, kept, stage2_counters,
        )
        per_video.append(nms(_rank_within_video(scored), cfg.nms_iou))
    counters["stage2_distances"] = stage2_counters.distance_evals
    counters["stage2_moments"] = stage2_counters.moments_scored
    ranked = _merge(per_video, cfg.top_k)
    return RankedResult(query.query_id, ranked, counters)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass
class MomentPrior:
    """Histogram of duration-normalized (start, end) over training moments."""

    bins: int
    probabilities: np.ndarray  # (bins, bins)

    def bin_of(self, s_norm: float, e_norm: float) -> tuple[int, int]:
        i = min(int(s_norm * self.bins), self.bins - 1)
        j = min(int(e_norm * self.bins), self.bins - 1)
        return i, j

    def probability(self, s_norm: float, e_norm: float) -> float:
        i, j = self.bin_of(s_norm, e_norm)
        return float(self.probabilities[i, j])


def fit_moment_prior(corpus: Corpus, queries: list[Query], bins: int = 10) -> MomentPrior:
    counts = np.zeros((bins, bins), dtype=np.float64)
    total = 0
    for q in queries:
        gt = q.ground_truth
        if gt is None:
            continue
        duration = corpus.video(gt.video_id).duration
        for span in gt.annotations:
            s_norm = span.start / duration
            e_norm = span.end / duration
            i = min(int(s_norm * bins), bins - 1)
            j = min(int(e_norm * bins), bins - 1)
            counts[i, j] += 1
            total += 1
    if total == 0:
        raise ValueError("cannot fit a moment prior without ground truth")
    return MomentPrior(bins, counts / total)


def baseline_scores(
    corpus: Corpus,
    query: Query,
    kind: str,
    enum_cfg: EnumConfig,
    cfg: RetrievalConfig,
    prior: Optional[MomentPrior] = None,
    params: Optional[ModelParams] = None,
    seed: int = 0,
) -> RankedResult:
    """Chance / moment-prior / endpoint-only reference rankings.

    Chance and the prior rank raw candidates without suppression (chance is
    a seeded permutation of the full candidate set; prior ties are broken
    by a seeded uniform draw). The endpoint-only baseline is a full
    exhaustive run with a visually-masked model.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    if kind == "tef_only":
        if params is None or not params.dims.tef_only:
            raise ValueError("tef_only baseline needs a model trained with masked visuals")
        return exhaustive_search(corpus, query, params, enum_cfg, cfg)

    rng = np.random.default_rng([seed, stable_u32(query.query_id)])
    all_moments: list[Moment] = []
    durations: list[float] = []
    for video in corpus.videos:
        for m in enumerate_moments(video, enum_cfg):
            all_moments.append(m)
            durations.append(video.duration)
    if kind == "chance":
        order = rng.permutation(len(all_moments))
        ranked = [ScoredMoment(all_moments[i], float(r)) for r, i in enumerate(order)]
        ranked.sort(key=lambda s: s.cost)
    else:
        if prior is None:
            raise ValueError("moment_prior baseline needs a fitted prior")
        jitter = rng.random(len(all_moments))
        scored = []
        for idx, m in enumerate(all_moments):
            p = prior.probability(m.span.start / durations[idx], m.span.end / durations[idx])
            scored.append((-p, jitter[idx], m))
        scored.sort(key=lambda t: (t[0], t[1], t[2].sort_key))
        ranked = [ScoredMoment(m, float(cost)) for cost, _, m in scored]
    return RankedResult(query.query_id, ranked[:cfg.top_k], {"stage1_moments": len(all_moments)})


# ---------------------------------------------------------------------------
# Batch driving
# ---------------------------------------------------------------------------


def restrict_corpus(corpus: Corpus, video_id: str) -> Corpus:
    video = corpus.video(video_id)
    return Corpus([video], {video_id: corpus.features_for(video_id)})


def search_queries(queries: list[Query], worker, workers: int = 1) -> list[RankedResult]:
    """Run `worker(query)` over queries, in input order, with a thread pool."""
    if workers <= 1:
        return [worker(q) for q in queries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, queries))
