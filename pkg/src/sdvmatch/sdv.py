"""Smoothed-density voxel grids over canonicalized keypoint neighborhoods.

A keypoint's spherical support is expressed in its local reference frame
(interest point at the origin) and binned into a c^3 grid: each voxel holds
the mean truncated-Gaussian kernel response of the points within 3h of its
centroid, and the whole grid is normalized to unit sum. Grids are (c, c, c)
float64 arrays indexed [j, k, l] along the frame's (x, y, z) axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import kernels
from .core import Points, SpatialIndex, as_points
from .errors import InvariantViolation
from .lrf import Lrf, estimate_lrf

Grid = NDArray[np.float64]  # shape (c, c, c)


@dataclass(frozen=True)
class GridConfig:
    """Geometry of the voxel grid.

    `occupancy` switches to the binary-occupancy ablation variant: voxels
    with at least one point within 3h of their centroid get value 1 before
    the unit-sum normalization.
    """

    edge: float
    voxels_per_axis: int
    kernel_width: float
    occupancy: bool = False

    def __post_init__(self) -> None:
        if self.edge <= 0:
            raise InvariantViolation(f"grid edge must be > 0, got {self.edge}")
        if self.voxels_per_axis < 2:
            raise InvariantViolation(
                f"voxels per axis must be >= 2, got {self.voxels_per_axis}"
            )
        if self.kernel_width <= 0:
            raise InvariantViolation(f"kernel width must be > 0, got {self.kernel_width}")
        if 3.0 * self.kernel_width > self.edge:
            raise InvariantViolation(
                f"kernel truncation 3h = {3.0 * self.kernel_width} exceeds grid edge {self.edge}"
            )

    @property
    def voxel_size(self) -> float:
        return self.edge / self.voxels_per_axis

    @property
    def support_radius(self) -> float:
        """Circumradius of the grid cube."""
        return math.sqrt(3.0) / 2.0 * self.edge

    def centroids_1d(self) -> NDArray[np.float64]:
        w = self.voxel_size
        return -self.edge / 2.0 + (np.arange(self.voxels_per_axis) + 0.5) * w


def canonicalize(points: Points, lrf: Lrf) -> Points:
    """Express points in the frame's coordinates; the origin maps to zero."""
    pts = as_points(points)
    return (pts - lrf.origin) @ lrf.to_canonical_matrix().T


def compute_sdv(points_canonical: Points, cfg: GridConfig) -> Grid:
    """Normalized smoothed-density grid of canonical-frame points.

    Points outside the grid's circumscribed sphere are discarded. Empty
    input (or no point reaching any centroid) yields the all-zero grid;
    otherwise values are non-negative and sum to one.
    """
    pts = as_points(points_canonical)
    if len(pts):
        pts = pts[np.linalg.norm(pts, axis=1) <= cfg.support_radius]
    ksum, count = kernels.sdv_accumulate(
        pts, cfg.voxels_per_axis, cfg.edge, cfg.kernel_width
    )
    if cfg.occupancy:
        values = (count > 0).astype(np.float64)
    else:
        occupied = count > 0
        values = np.zeros_like(ksum)
        values[occupied] = ksum[occupied] / count[occupied]
    total = values.sum()
    if total > 0.0:
        values /= total
    return values


def extract_patch(
    points: Points,
    index: SpatialIndex,
    keypoint_index: int,
    cfg: GridConfig,
    lrf_radius: float,
) -> Grid:
    """Full per-keypoint encoding: LRF, canonicalization, density grid.

    Raises DegenerateSupport (from the LRF stage); callers batching over
    keypoints are expected to skip those.
    """
    pts = as_points(points)
    p = pts[keypoint_index]
    frame = estimate_lrf(pts, index, p, lrf_radius)
    support = index.radius_query(p, cfg.support_radius)
    canonical = canonicalize(pts[support], frame)
    return compute_sdv(canonical, cfg)


def grid_to_text(grid: Grid) -> str:
    """Debug dump: c^3 floats, x-index fastest, then y, then z."""
    flat = np.asarray(grid, dtype=np.float64).flatten(order="F")
    return " ".join(repr(float(v)) for v in flat)
