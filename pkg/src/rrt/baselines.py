"""Classic reranking baselines: alpha-weighted query expansion and geometric
verification (mutual nearest-neighbor matching plus RANSAC homography, scored
by inlier count).

The RANSAC is hypothesize-and-verify with normalized 4-point DLT and a
symmetric-transfer inlier test, vectorized across the whole iteration budget:
all sample quadruples are drawn up front from the seeded generator, so the
result is a pure function of (matches, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import ImageRecord, l2_normalize

__all__ = [
    "Match",
    "GVConfig",
    "aqe_weights",
    "alpha_qe_expand",
    "mutual_nn_matches",
    "ransac_homography",
    "gv_score",
]

_COLLINEAR_EPS = 1e-6   # triangle area floor on Hartley-normalized coords
_W_EPS = 1e-12          # homogeneous scale floor when projecting


@dataclass(frozen=True)
class Match:
    a_index: int
    b_index: int
    distance: float


@dataclass(frozen=True)
class GVConfig:
    iterations: int = 2000
    inlier_threshold: float = 3.0  # pixels, symmetric transfer
    ratio: Optional[float] = None  # Lowe ratio test, off by default
    seed: int = 0


def aqe_weights(sims: np.ndarray, alpha: float) -> np.ndarray:
    """Neighbor weights max(sim, 0)^alpha; the clamp keeps the exponent real
    on negative cosines (and 0^0 evaluates to 1, so alpha=0 is uniform)."""
    return np.power(np.maximum(np.asarray(sims, dtype=np.float64), 0.0), alpha)


def alpha_qe_expand(
    query_vec: np.ndarray,
    neighbor_vecs: np.ndarray,
    sims: np.ndarray,
    nqe: int,
    alpha: float,
) -> np.ndarray:
    """Expanded query: normalize(q + sum_i max(sim_i, 0)^alpha * d_i) over the
    top-nqe neighbors.  The query itself participates with weight 1; nqe=0
    returns the normalized query unchanged."""
    q = np.asarray(query_vec, dtype=np.float64)
    if nqe == 0:
        return l2_normalize(q).astype(np.float32)
    vecs = np.asarray(neighbor_vecs, dtype=np.float64)[:nqe]
    weights = aqe_weights(np.asarray(sims)[:nqe], alpha)
    expanded = q + weights @ vecs
    return l2_normalize(expanded).astype(np.float32)


def mutual_nn_matches(
    locals_a: np.ndarray, locals_b: np.ndarray, ratio: Optional[float] = None
) -> list[Match]:
    """Pairs (i, j) where j is i's Euclidean nearest neighbor in B and i is
    j's nearest in A.  With a ratio r, both directions must also pass
    d1 <= r * d2 against their second-nearest, keeping the match set
    symmetric.  Returned sorted by the A index."""
    a = np.asarray(locals_a, dtype=np.float64)
    b = np.asarray(locals_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("mutual_nn_matches needs non-empty descriptor sets")
    d2 = (
        (a * a).sum(1, keepdims=True)
        + (b * b).sum(1, keepdims=True).T
        - 2.0 * (a @ b.T)
    )
    dist = np.sqrt(np.maximum(d2, 0.0))
    nn_b = dist.argmin(axis=1)  # for each i, best j
    nn_a = dist.argmin(axis=0)  # for each j, best i

    ok_a = np.ones(len(a), dtype=bool)
    ok_b = np.ones(len(b), dtype=bool)
    if ratio is not None:
        if dist.shape[1] > 1:
            two = np.partition(dist, 1, axis=1)[:, :2]
            ok_a = two[:, 0] <= ratio * two[:, 1]
        if dist.shape[0] > 1:
            two = np.partition(dist, 1, axis=0)[:2, :]
            ok_b = two[0, :] <= ratio * two[1, :]

    out = []
    for i in range(len(a)):
        j = int(nn_b[i])
        if int(nn_a[j]) == i and ok_a[i] and ok_b[j]:
            out.append(Match(i, j, float(dist[i, j])))
    return out


def _similarity_T(pts: np.ndarray):
    """Hartley normalization per hypothesis: [it,4,2] -> (T, T_inv, normalized
    pts, validity).  T maps raw coords to centered coords with mean distance
    sqrt(2)."""
    it = pts.shape[0]
    c = pts.mean(axis=1, keepdims=True)
    d = np.linalg.norm(pts - c, axis=2).mean(axis=1)
    valid = d > 1e-9
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    T = np.zeros((it, 3, 3))
    T[:, 0, 0] = s
    T[:, 1, 1] = s
    T[:, 0, 2] = -s * c[:, 0, 0]
    T[:, 1, 2] = -s * c[:, 0, 1]
    T[:, 2, 2] = 1.0
    Tinv = np.zeros((it, 3, 3))
    Tinv[:, 0, 0] = 1.0 / s
    Tinv[:, 1, 1] = 1.0 / s
    Tinv[:, 0, 2] = c[:, 0, 0]
    Tinv[:, 1, 2] = c[:, 0, 1]
    Tinv[:, 2, 2] = 1.0
    pn = (pts - c) * s[:, None, None]
    return T, Tinv, pn, valid


def _dlt_batch(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Direct linear transform on normalized correspondences.

    pa, pb: [it, m, 2] -> H_n [it, 3, 3] (smallest right singular vector)."""
    it, m, _ = pa.shape
    x, y = pa[..., 0], pa[..., 1]
    u, v = pb[..., 0], pb[..., 1]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=-1)
    A = np.concatenate([r1, r2], axis=1)  # [it, 2m, 9]
    _, _, vt = np.linalg.svd(A)
    return vt[..., -1, :].reshape(it, 3, 3)


def _noncollinear(pts: np.ndarray) -> np.ndarray:
    """[it,4,2] -> bool[it]: every triple spans a triangle of nonzero area."""
    idx = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    ok = np.ones(pts.shape[0], dtype=bool)
    for i, j, k in idx:
        e1 = pts[:, j] - pts[:, i]
        e2 = pts[:, k] - pts[:, i]
        area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        ok &= area > _COLLINEAR_EPS
    return ok


def _project(H: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply homographies [it,3,3] to points [n,2] -> ([it,n,2], valid)."""
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    q = np.einsum("hij,nj->hni", H, ph)
    w = q[..., 2]
    good = np.abs(w) > _W_EPS
    w = np.where(good, w, 1.0)
    return q[..., :2] / w[..., None], good


def _symmetric_errors(H: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """sqrt(forward^2 + backward^2) transfer error, [it, n]; inf where the
    homography is not invertible or the projection degenerates."""
    det = np.linalg.det(H)
    invertible = np.abs(det) > 1e-12
    Hsafe = np.where(invertible[:, None, None], H, np.eye(3))
    Hinv = np.linalg.inv(Hsafe)

    fwd, ok_f = _project(H, pts_a)
    bwd, ok_b = _project(Hinv, pts_b)
    e = np.sqrt(((fwd - pts_b[None]) ** 2).sum(-1) + ((bwd - pts_a[None]) ** 2).sum(-1))
    e = np.where(ok_f & ok_b & invertible[:, None], e, np.inf)
    return e


def ransac_homography(
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    iterations: int = 2000,
    inlier_threshold: float = 3.0,
    seed: int = 0,
    sample_indices: np.ndarray | None = None,
) -> tuple[Optional[np.ndarray], int, np.ndarray]:
    """RANSAC homography from matched points; returns (H, inliers, mask).

    Samples 4 correspondences per iteration (all draws up front from the
    seeded generator; sample_indices overrides them for schedule-replay
    tests), estimates H by normalized DLT, counts symmetric-transfer inliers,
    then refits on the best consensus set by least-squares DLT.  Fewer than 4
    matches, or a budget of entirely degenerate samples, gives (None, 0, all
    False).  H is normalized so H[2,2] == 1.
    """
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    n = len(pts_a)
    if len(pts_b) != n:
        raise ValueError("point sets must align")
    empty = np.zeros(n, dtype=bool)
    if n < 4:
        return None, 0, empty
    if inlier_threshold <= 0:
        raise ValueError("inlier_threshold must be positive")

    if sample_indices is None:
        rng = np.random.default_rng(seed)
        sample_indices = np.argsort(rng.random((iterations, n)), axis=1)[:, :4]
    samples_a = pts_a[sample_indices]  # [it, 4, 2]
    samples_b = pts_b[sample_indices]

    Ta, _, pa_n, va = _similarity_T(samples_a)
    Tb, Tb_inv, pb_n, vb = _similarity_T(samples_b)
    valid = va & vb & _noncollinear(pa_n) & _noncollinear(pb_n)
    if not np.any(valid):
        return None, 0, empty

    Hn = _dlt_batch(pa_n, pb_n)
    H = Tb_inv @ Hn @ Ta
    finite = np.isfinite(H).all(axis=(1, 2))
    scale_ok = np.abs(H[:, 2, 2]) > _W_EPS
    valid &= finite & scale_ok
    if not np.any(valid):
        return None, 0, empty
    H = np.where(valid[:, None, None], H, np.eye(3))

    errors = _symmetric_errors(H, pts_a, pts_b)
    inliers = errors < inlier_threshold
    counts = np.where(valid, inliers.sum(axis=1), -1)
    best = int(np.argmax(counts))  # ties resolve to the earliest iteration
    if counts[best] < 4:
        return None, 0, empty
    best_mask = inliers[best]
    best_H = H[best] / H[best, 2, 2]

    # Least-squares refit on the winning consensus set.
    ia = pts_a[best_mask][None]
    ib = pts_b[best_mask][None]
    Ta1, _, pa1, va1 = _similarity_T(ia)
    Tb1, Tb1_inv, pb1, vb1 = _similarity_T(ib)
    if va1[0] and vb1[0]:
        Hr = (Tb1_inv @ _dlt_batch(pa1, pb1) @ Ta1)[0]
        if np.isfinite(Hr).all() and abs(Hr[2, 2]) > _W_EPS:
            err = _symmetric_errors(Hr[None], pts_a, pts_b)[0]
            mask = err < inlier_threshold
            if mask.sum() >= 4:
                return Hr / Hr[2, 2], int(mask.sum()), mask
    return best_H, int(best_mask.sum()), best_mask


def _pair_seed(base: int, qid: int, cid: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base, qid, cid])


def gv_score(query: ImageRecord, candidate: ImageRecord, cfg: GVConfig) -> int:
    """Inlier count of a RANSAC homography over mutual-NN local matches;
    0 whenever matching or estimation fails.  Deterministic per
    (seed, query id, candidate id), independent of evaluation order."""
    la, lb = query.locals_matrix(), candidate.locals_matrix()
    if la.shape[0] == 0 or lb.shape[0] == 0:
        return 0
    matches = mutual_nn_matches(la, lb, ratio=cfg.ratio)
    if len(matches) < 4:
        return 0
    pa = query.positions()[[m.a_index for m in matches]]
    pb = candidate.positions()[[m.b_index for m in matches]]
    seed = int(_pair_seed(cfg.seed, query.id, candidate.id).generate_state(1)[0])
    _, count, _ = ransac_homography(
        pa, pb, iterations=cfg.iterations,
        inlier_threshold=cfg.inlier_threshold, seed=seed,
    )
    return count
