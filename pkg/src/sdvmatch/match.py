"""Descriptor matching, rigid estimation, RANSAC registration, overlap.

Feature-space search is exact (chunked brute force); RANSAC is seeded and
sequential so every run is reproducible, with an adaptive iteration budget
driven by the best inlier ratio seen so far.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import Points, RigidTransform, SpatialIndex, apply_transform, as_points
from .errors import (
    DegenerateConfiguration,
    DimMismatch,
    EmptyCloud,
    InvariantViolation,
    NoModelFound,
    TooFewCorrespondences,
)

_NN_CHUNK = 1024


@dataclass(frozen=True)
class CorrespondenceSet:
    """Mutual nearest-neighbor pairs between two descriptor sets."""

    index_p: NDArray[np.intp]
    index_q: NDArray[np.intp]
    distances: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.index_p)


@dataclass(frozen=True)
class RansacParams:
    max_iterations: int = 55000
    inlier_distance: float = 0.1
    sample_size: int = 3
    success_probability: float = 0.999
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.success_probability < 1:
            raise InvariantViolation("success probability must be in (0, 1)")
        if self.sample_size < 3:
            raise InvariantViolation("sample size must be >= 3")
        if self.inlier_distance <= 0:
            raise InvariantViolation("inlier distance must be > 0")
        if self.max_iterations < 1:
            raise InvariantViolation("max iterations must be >= 1")


def _nearest_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index into b of the l2-nearest row for each row of a, plus distances.

    Ties resolve to the smallest index (argmin semantics). Exact, chunked
    to bound the distance-matrix memory.
    """
    nn = np.empty(len(a), dtype=np.intp)
    dist = np.empty(len(a), dtype=np.float64)
    b_sq = np.einsum("ij,ij->i", b, b)
    for lo in range(0, len(a), _NN_CHUNK):
        chunk = a[lo:lo + _NN_CHUNK]
        d2 = np.einsum("ij,ij->i", chunk, chunk)[:, None] + b_sq[None, :] - 2.0 * chunk @ b.T
        np.maximum(d2, 0.0, out=d2)
        j = np.argmin(d2, axis=1)
        nn[lo:lo + _NN_CHUNK] = j
        dist[lo:lo + _NN_CHUNK] = np.sqrt(d2[np.arange(len(chunk)), j])
    return nn, dist


def mutual_correspondences(desc_p, desc_q) -> CorrespondenceSet:
    """Pairs (i, j) where each descriptor is the other's nearest neighbor."""
    p = np.asarray(desc_p, dtype=np.float64)
    q = np.asarray(desc_q, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2:
        raise DimMismatch("descriptor sets must be 2-D matrices")
    if p.shape[1] != q.shape[1]:
        raise DimMismatch(f"descriptor dimensions differ: {p.shape[1]} vs {q.shape[1]}")
    if len(p) == 0 or len(q) == 0:
        raise DimMismatch("descriptor sets must be non-empty")
    nn_pq, _ = _nearest_rows(p, q)
    nn_qp, _ = _nearest_rows(q, p)
    i = np.arange(len(p))
    mutual = nn_qp[nn_pq] == i
    idx_p = i[mutual].astype(np.intp)
    idx_q = nn_pq[mutual].astype(np.intp)
    # exact distances for the matched pairs (the matmul trick used for the
    # search loses precision near zero)
    dist = np.linalg.norm(p[idx_p] - q[idx_q], axis=1)
    return CorrespondenceSet(index_p=idx_p, index_q=idx_q, distances=dist)


def estimate_rigid(src_pts, dst_pts) -> RigidTransform:
    """Least-squares rigid motion src -> dst (orthogonal Procrustes).

    Minimizes sum ||dst_i - (R src_i + t)||^2 with det(R) = +1 enforced by
    flipping the smallest singular direction when the fit reflects.
    """
    src = as_points(src_pts)
    dst = as_points(dst_pts)
    if src.shape != dst.shape:
        raise DimMismatch(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise DegenerateConfiguration(f"need >= 3 point pairs, got {len(src)}")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    a = src - c_src
    b = dst - c_dst
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] <= 0 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateConfiguration("source sample is collinear or coincident")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = c_dst - r @ c_src
    return RigidTransform(r, t)


def ransac_iterations_needed(inlier_ratio: float, sample_size: int, p: float) -> int:
    # Local import keeps module dependencies acyclic.
    from .evaluation import ransac_iterations

    return ransac_iterations(inlier_ratio, sample_size, p)


def ransac_register(
    kp_p: Points,
    kp_q: Points,
    corrs: CorrespondenceSet,
    params: RansacParams,
) -> tuple[RigidTransform, NDArray[np.intp]]:
    """Robust transform mapping keypoints of Q onto P from noisy matches.

    Returns the best model refit on its inliers plus the indices (into the
    correspondence set) of the pairs that are inliers under that final
    transform. The iteration budget shrinks adaptively as better models
    raise the observed inlier ratio.
    """
    p_all = as_points(kp_p)
    q_all = as_points(kp_q)
    n = len(corrs)
    if n < params.sample_size:
        raise TooFewCorrespondences(f"{n} correspondences, need >= {params.sample_size}")
    src = q_all[corrs.index_q]  # model maps Q -> P
    dst = p_all[corrs.index_p]

    rng = np.random.default_rng(params.seed)
    best_count = 0
    best_rmse = np.inf
    best_inliers: NDArray[np.bool_] | None = None
    budget = params.max_iterations
    it = 0
    while it < budget:
        it += 1
        pick = rng.choice(n, size=params.sample_size, replace=False)
        try:
            model = estimate_rigid(src[pick], dst[pick])
        except DegenerateConfiguration:
            continue
        resid = np.linalg.norm(apply_transform(src, model) - dst, axis=1)
        inl = resid < params.inlier_distance
        count = int(inl.sum())
        if count < params.sample_size:
            continue
        rmse = float(np.sqrt(np.mean(resid[inl] ** 2)))
        if count > best_count or (count == best_count and rmse < best_rmse):
            best_count = count
            best_rmse = rmse
            best_inliers = inl
            ratio = count / n
            if ratio >= 1.0:
                needed = 1
            else:
                needed = ransac_iterations_needed(
                    ratio, params.sample_size, params.success_probability
                )
            budget = min(params.max_iterations, max(needed, it))
    if best_inliers is None:
        raise NoModelFound(
            f"no sample produced >= {params.sample_size} inliers in {it} iterations"
        )
    refit = estimate_rigid(src[best_inliers], dst[best_inliers])
    resid = np.linalg.norm(apply_transform(src, refit) - dst, axis=1)
    final_inliers = np.nonzero(resid < params.inlier_distance)[0].astype(np.intp)
    return refit, final_inliers


def overlap(cloud_p: Points, cloud_q: Points, transform: RigidTransform,
            tau_psi: float) -> float:
    """Fraction of P with a neighbor in T(Q) closer than tau_psi.

    Asymmetric by construction; call with arguments swapped (and the
    inverse transform) for the other direction.
    """
    p = as_points(cloud_p)
    q = as_points(cloud_q)
    if len(p) == 0 or len(q) == 0:
        raise EmptyCloud("overlap requires two non-empty clouds")
    if tau_psi <= 0:
        raise InvariantViolation(f"tau_psi must be > 0, got {tau_psi}")
    moved = SpatialIndex(apply_transform(q, transform))
    dist, _ = moved.nearest(p)
    return float(np.mean(dist < tau_psi))


def overlap_both_ways(cloud_p: Points, cloud_q: Points, transform: RigidTransform,
                      tau_psi: float) -> tuple[float, float]:
    """(psi_PQ, psi_QP) under T and its inverse."""
    from .core import invert

    return (
        overlap(cloud_p, cloud_q, transform, tau_psi),
        overlap(cloud_q, cloud_p, invert(transform), tau_psi),
    )
