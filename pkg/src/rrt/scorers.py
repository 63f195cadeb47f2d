"""Pairwise scorer factories for the rerank stage.

A scorer is a callable (query_id, candidate_ids) -> list of scores, closed
over the record sets; rerank_topk consumes them.  All scorers are
deterministic: the learned scorer batches candidates in one forward pass, the
geometric one derives a per-pair RANSAC seed from (seed, query id, candidate
id), the oracle counts shared part-prototype assignments on synthetic data.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .baselines import GVConfig, gv_score
from .data import ImageRecord
from .model import ModelConfig, ModelParams, score_batch

__all__ = [
    "make_rrt_scorer",
    "make_gv_scorer",
    "make_oracle_scorer",
    "oracle_part_ids",
]


def _record_maps(queries: Sequence[ImageRecord], gallery: Sequence[ImageRecord]):
    return {r.id: r for r in queries}, {r.id: r for r in gallery}


def make_rrt_scorer(
    params: ModelParams,
    cfg: ModelConfig,
    queries: Sequence[ImageRecord],
    gallery: Sequence[ImageRecord],
):
    qmap, gmap = _record_maps(queries, gallery)

    def scorer(query_id: int, candidate_ids: Sequence[int]) -> list[float]:
        q = qmap[query_id]
        return score_batch(params, cfg, q, [gmap[g] for g in candidate_ids])

    return scorer


def make_gv_scorer(
    queries: Sequence[ImageRecord],
    gallery: Sequence[ImageRecord],
    gv_cfg: GVConfig,
    threads: int = 1,
):
    qmap, gmap = _record_maps(queries, gallery)

    def scorer(query_id: int, candidate_ids: Sequence[int]) -> list[float]:
        q = qmap[query_id]
        cands = [gmap[g] for g in candidate_ids]
        if threads > 1 and len(cands) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return [float(s) for s in pool.map(lambda c: gv_score(q, c, gv_cfg), cands)]
        return [float(gv_score(q, c, gv_cfg)) for c in cands]

    return scorer


def oracle_part_ids(
    record: ImageRecord, part_bank: np.ndarray, threshold: float = 0.7
) -> frozenset[int]:
    """Nearest-prototype assignment of a record's locals over the generator's
    part bank [n_instances, parts_per_instance, d_l]; locals whose best cosine
    falls below the threshold (distractors) are dropped."""
    if not record.locals:
        return frozenset()
    flat = part_bank.reshape(-1, part_bank.shape[-1]).astype(np.float32)
    sims = record.locals_matrix() @ flat.T
    best = sims.argmax(axis=1)
    keep = sims[np.arange(len(best)), best] >= threshold
    return frozenset(int(b) for b in best[keep])


def make_oracle_scorer(
    part_bank: np.ndarray,
    queries: Sequence[ImageRecord],
    gallery: Sequence[ImageRecord],
    threshold: float = 0.7,
):
    """Shared-part-count scorer: the planted upper bound for reranking on
    synthetic data."""
    qmap, gmap = _record_maps(queries, gallery)
    cache: dict[int, frozenset[int]] = {}

    def ids_of(rec: ImageRecord) -> frozenset[int]:
        got = cache.get(rec.id)
        if got is None:
            got = oracle_part_ids(rec, part_bank, threshold)
            cache[rec.id] = got
        return got

    def scorer(query_id: int, candidate_ids: Sequence[int]) -> list[float]:
        q_ids = ids_of(qmap[query_id])
        return [float(len(q_ids & ids_of(gmap[g]))) for g in candidate_ids]

    return scorer
