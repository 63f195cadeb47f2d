"""Exact global k-NN over unit-norm descriptors and top-K rerank plumbing.

Galleries at desk scale are small enough for exhaustive search, which keeps
reranker comparisons free of approximation noise.  All orderings use the
total order (score desc, prior rank asc, id asc) so results are reproducible
regardless of internal evaluation order.

Index wire format (little-endian), extension ``.rrti``:

    magic "RRTI" | u32 version=1 | u8 projected | u32 n | u32 dim
    | n x u32 ids | n*dim x f32 row-major vectors

Neighbor lists serialize as JSON Lines, one object per line:

    {"query": <id>, "method": "<tag>", "neighbors": [[<id>, <score>], ...]}
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .baselines import alpha_qe_expand
from .data import ImageRecord, l2_normalize
from .errors import DataFormatError

__all__ = [
    "GlobalIndex",
    "NeighborList",
    "build_index",
    "save_index",
    "load_index",
    "query_vector",
    "knn_search",
    "rerank_topk",
    "aqe_requery",
    "aqe_then_rerank",
    "write_neighbors",
    "read_neighbors",
]

INDEX_MAGIC = b"RRTI"
INDEX_VERSION = 1

# scorer(query_id, candidate_ids) -> scores aligned with candidate_ids
Scorer = Callable[[int, Sequence[int]], Sequence[float]]


@dataclass
class GlobalIndex:
    ids: np.ndarray       # int64[n], unique
    vectors: np.ndarray   # float32[n, dim], rows unit-norm
    projected: bool = False

    def __post_init__(self):
        if len(set(self.ids.tolist())) != len(self.ids):
            raise ValueError("index ids must be unique")


@dataclass
class NeighborList:
    query_id: int
    entries: list[tuple[int, float]]
    method: str = "global"
    truncated: bool = False  # set when k exceeded the gallery size

    def gallery_ids(self) -> list[int]:
        return [g for g, _ in self.entries]


def build_index(
    records: Sequence[ImageRecord],
    projected: bool = False,
    params=None,
    cfg=None,
) -> GlobalIndex:
    """Index over raw globals, or over the model's projected globals."""
    ids = np.array([r.id for r in records], dtype=np.int64)
    if projected:
        if params is None or cfg is None:
            raise ValueError("projected index needs model params and config")
        raw = np.stack([l2_normalize(r.global_desc.astype(np.float32)) for r in records])
        mat = raw @ params["global_proj.w"].data + params["global_proj.b"].data
    else:
        mat = np.stack([r.global_desc.astype(np.float32) for r in records])
    mat = np.stack([l2_normalize(row) for row in mat]).astype(np.float32)
    return GlobalIndex(ids=ids, vectors=mat, projected=projected)


def query_vector(index: GlobalIndex, record: ImageRecord, params=None, cfg=None) -> np.ndarray:
    """The record's global descriptor in the index's space, unit-norm."""
    v = l2_normalize(record.global_desc.astype(np.float32))
    if index.projected:
        if params is None:
            raise ValueError("projected index needs model params to embed queries")
        v = l2_normalize(v @ params["global_proj.w"].data + params["global_proj.b"].data)
    return v.astype(np.float32)


def save_index(index: GlobalIndex, path) -> None:
    n, dim = index.vectors.shape
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IBII", INDEX_VERSION, int(index.projected), n, dim))
        fh.write(index.ids.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())


def load_index(path) -> GlobalIndex:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != INDEX_MAGIC:
        raise DataFormatError(f"bad index magic, expected {INDEX_MAGIC!r}", offset=0)
    header = struct.calcsize("<IBII")
    if len(raw) < 4 + header:
        raise DataFormatError("truncated index header", offset=len(raw))
    version, projected, n, dim = struct.unpack("<IBII", raw[4 : 4 + header])
    if version != INDEX_VERSION:
        raise DataFormatError(f"unsupported index version {version}", offset=4)
    off = 4 + header
    need = n * 4 + n * dim * 4
    if len(raw) != off + need:
        raise DataFormatError(
            f"index payload is {len(raw) - off} bytes, expected {need}", offset=off
        )
    ids = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    vecs = (
        np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off + n * 4)
        .reshape(n, dim)
        .copy()
    )
    return GlobalIndex(ids=ids, vectors=vecs, projected=bool(projected))


def knn_search(
    index: GlobalIndex, query_vec: np.ndarray, k: int, query_id: int | None = None
) -> NeighborList:
    """Top-k by inner product (cosine on unit vectors), score desc, ties by
    ascending id.  k beyond the gallery returns the full ranking flagged as
    truncated.  When the query itself sits in the gallery (same id), its row
    is excluded."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.vectors @ np.asarray(query_vec, dtype=np.float32)
    ids = index.ids
    if query_id is not None:
        keep = ids != query_id
        ids = ids[keep]
        scores = scores[keep]
    order = np.lexsort((ids, -scores.astype(np.float64)))
    truncated = k > len(ids)
    order = order[: min(k, len(ids))]
    entries = [(int(ids[i]), float(scores[i])) for i in order]
    return NeighborList(
        query_id=-1 if query_id is None else int(query_id),
        entries=entries,
        method="global",
        truncated=truncated,
    )


def rerank_topk(
    neighbors: NeighborList, scorer: Scorer, k: int, method: str = "rrt"
) -> NeighborList:
    """Re-sort the first min(k, len) entries by scorer score (ties keep prior
    rank); entries beyond k keep membership, order and scores untouched."""
    if k < 0:
        raise ValueError("k must be >= 0")
    m = min(k, len(neighbors.entries))
    prefix = neighbors.entries[:m]
    if m:
        scores = list(scorer(neighbors.query_id, [g for g, _ in prefix]))
        order = sorted(range(m), key=lambda i: (-scores[i], i))
        new_prefix = [(prefix[i][0], float(scores[i])) for i in order]
    else:
        new_prefix = []
    return NeighborList(
        query_id=neighbors.query_id,
        entries=new_prefix + neighbors.entries[m:],
        method=method,
        truncated=neighbors.truncated,
    )


def aqe_requery(
    index: GlobalIndex,
    query_vec: np.ndarray,
    query_id: int | None,
    nqe: int,
    alpha: float,
    base: NeighborList | None = None,
) -> NeighborList:
    """Alpha-weighted query expansion: aggregate the top-nqe neighbors of the
    base ranking into the query, then re-rank the whole gallery with the
    expanded vector.  Without a base ranking, plain global search provides
    the top neighbors."""
    if base is None:
        base = knn_search(index, query_vec, k=len(index.ids), query_id=query_id)
    top = base.entries[:nqe]
    if top:
        pos = {int(i): row for row, i in enumerate(index.ids)}
        vecs = np.stack([index.vectors[pos[g]] for g, _ in top])
        sims = np.array([s for _, s in top])
        expanded = alpha_qe_expand(query_vec, vecs, sims, nqe, alpha)
    else:
        expanded = l2_normalize(query_vec)
    out = knn_search(index, expanded, k=len(index.ids), query_id=query_id)
    out.method = "aqe"
    out.query_id = -1 if query_id is None else query_id
    return out


def aqe_then_rerank(
    index: GlobalIndex,
    query_vec: np.ndarray,
    query_id: int | None,
    scorer: Scorer,
    nqe: int,
    alpha: float,
    k: int,
    base: NeighborList | None = None,
) -> NeighborList:
    """Full alpha-QE re-ranking followed by a learned rerank of its top-k."""
    expanded = aqe_requery(index, query_vec, query_id, nqe, alpha, base=base)
    return rerank_topk(expanded, scorer, k, method="aqe+rrt")


# -- JSONL serialization ----------------------------------------------------


def write_neighbors(path, lists: Sequence[NeighborList]) -> None:
    with open(path, "w") as fh:
        for nl in lists:
            obj = {
                "query": int(nl.query_id),
                "method": nl.method,
                "neighbors": [[int(g), float(s)] for g, s in nl.entries],
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def read_neighbors(path) -> list[NeighborList]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                nl = NeighborList(
                    query_id=int(obj["query"]),
                    entries=[(int(g), float(s)) for g, s in obj["neighbors"]],
                    method=str(obj.get("method", "global")),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"bad neighbor line {lineno}: {exc}") from exc
            out.append(nl)
    return out
