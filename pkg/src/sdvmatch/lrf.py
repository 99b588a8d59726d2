"""Local reference frame estimation at an interest point.

The frame is built from the eigenstructure of the neighborhood covariance
taken about the interest point itself (not the centroid): the z-axis is the
smallest-eigenvalue direction with a sign vote, the x-axis is a weighted sum
of in-plane projections favoring close points with large normal offsets, and
y = x cross z completes the (left-handed) frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import Points, SpatialIndex, Vec3, as_points
from .errors import DegenerateSupport

# Two smallest covariance eigenvalues closer than this (relative to the
# largest) make the normal direction ambiguous; we refuse rather than guess.
EIGENVALUE_TIE_REL = 1e-8

# Below this accumulator norm the x-axis direction is numerically meaningless.
X_AXIS_MIN_NORM = 1e-12

MIN_SUPPORT = 4


@dataclass(frozen=True)
class Lrf:
    """Orthonormal frame anchored at `origin` with y = x cross z."""

    origin: Vec3
    x_axis: Vec3
    y_axis: Vec3
    z_axis: Vec3

    def to_canonical_matrix(self) -> NDArray[np.float64]:
        """Rows are the axes: canonical coords are M @ (p - origin)."""
        return np.stack([self.x_axis, self.y_axis, self.z_axis])


def support_covariance(diffs: NDArray[np.float64]) -> NDArray[np.float64]:
    """(1/N) sum of outer products of the offsets from the interest point."""
    d = np.asarray(diffs, dtype=np.float64)
    return d.T @ d / len(d)


def surface_normal(diffs: NDArray[np.float64]) -> Vec3:
    """Sign-resolved normal from offsets p_i - p of the support.

    The normal is the unit eigenvector for the smallest covariance
    eigenvalue, kept as returned when the votes sum(<n, p - p_i>) are >= 0
    and flipped otherwise.
    """
    cov = support_covariance(diffs)
    evals, evecs = np.linalg.eigh(cov)
    if evals[2] <= 0.0:
        raise DegenerateSupport("support points are coincident")
    if evals[1] - evals[0] < EIGENVALUE_TIE_REL * evals[2]:
        raise DegenerateSupport(
            "smallest covariance eigenvalue is not unique "
            f"(gap {evals[1] - evals[0]:.3e} vs largest {evals[2]:.3e})"
        )
    normal = evecs[:, 0]
    votes = -float(normal @ diffs.sum(axis=0))  # sum of <n, p - p_i>
    if votes >= 0.0:
        return normal
    return -normal


def weighted_plane_direction(
    projections: NDArray[np.float64], weights: NDArray[np.float64]
) -> Vec3:
    """Normalized weighted vector sum; raises when the sum has no direction."""
    acc = weights @ projections
    norm = float(np.linalg.norm(acc))
    if norm < X_AXIS_MIN_NORM:
        raise DegenerateSupport(f"x-axis accumulator norm {norm:.3e} below {X_AXIS_MIN_NORM}")
    return acc / norm


def estimate_lrf(points: Points, index: SpatialIndex, p, r_lrf: float) -> Lrf:
    """Unique reference frame of interest point `p` from its r_lrf ball.

    Raises DegenerateSupport when the support has fewer than four points,
    when the smallest covariance eigenvalue is not simple (coincident or
    collinear supports), or when the x-axis vote sum vanishes (e.g. exactly
    planar supports through p).
    """
    pts = as_points(points)
    p = np.asarray(p, dtype=np.float64).reshape(3)
    support = index.radius_query(p, r_lrf)
    if len(support) < MIN_SUPPORT:
        raise DegenerateSupport(
            f"support has {len(support)} points, need at least {MIN_SUPPORT}"
        )
    diffs = pts[support] - p
    z = surface_normal(diffs)

    dist = np.linalg.norm(diffs, axis=1)
    scalar_proj = diffs @ z
    planar = diffs - scalar_proj[:, None] * z[None, :]
    alpha = (r_lrf - dist) ** 2
    beta = scalar_proj**2
    x = weighted_plane_direction(planar, alpha * beta)
    # Remove the (tiny) numerical component of x along z, then renormalize.
    x = x - (x @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(x, z)
    return Lrf(origin=p, x_axis=x, y_axis=y, z_axis=z)
