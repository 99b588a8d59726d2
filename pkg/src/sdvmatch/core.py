"""Geometric primitives: point arrays, rigid transforms, spatial queries.

Point clouds are plain ``(N, 3)`` float64 arrays throughout the package;
:func:`as_points` normalizes and validates at module boundaries. All
geometry is computed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .errors import InvariantViolation

Points = NDArray[np.float64]  # shape (N, 3)
Vec3 = NDArray[np.float64]    # shape (3,)
Mat3 = NDArray[np.float64]    # shape (3, 3)

_ORTHO_TOL = 1e-9


def as_points(a) -> Points:
    """Convert array-like to a contiguous (N, 3) float64 array.

    Raises InvariantViolation on wrong shape or non-finite coordinates.
    """
    pts = np.ascontiguousarray(a, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvariantViolation(f"point array must have shape (N, 3), got {pts.shape}")
    if pts.size and not np.all(np.isfinite(pts)):
        raise InvariantViolation("point array contains NaN or Inf")
    return pts


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> rotation @ p + translation."""

    rotation: Mat3
    translation: Vec3

    def __post_init__(self) -> None:
        R = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise InvariantViolation(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=_ORTHO_TOL):
            raise InvariantViolation("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvariantViolation("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvariantViolation(f"homogeneous matrix must be 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> NDArray[np.float64]:
        """Return the 4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return T such that T(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def apply_transform(points: Points, transform: RigidTransform) -> Points:
    """Apply a rigid motion to every point; order and count are preserved."""
    pts = as_points(points)
    return pts @ transform.rotation.T + transform.translation


def invert(transform: RigidTransform) -> RigidTransform:
    """Inverse motion: rotation.T, -rotation.T @ translation."""
    rt = transform.rotation.T
    return RigidTransform(rt, -rt @ transform.translation)


class SpatialIndex:
    """k-d tree over an immutable point cloud.

    Queries return exactly the brute-force result set (the backing tree is
    exact, not approximate). Safe for concurrent queries.
    """

    def __init__(self, points: Points):
        self.points = as_points(points)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def radius_query(self, center, radius: float) -> NDArray[np.intp]:
        """Indices of all points with ||p - center||_2 <= radius."""
        if radius <= 0:
            raise InvariantViolation(f"radius must be > 0, got {radius}")
        if self._tree is None:
            return np.empty(0, dtype=np.intp)
        idx = self._tree.query_ball_point(np.asarray(center, dtype=np.float64), radius)
        return np.asarray(sorted(idx), dtype=np.intp)

    def nearest(self, queries) -> tuple[NDArray[np.float64], NDArray[np.intp]]:
        """Distance and index of the closest point for each query row."""
        if self._tree is None:
            raise InvariantViolation("nearest query on an empty index")
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64), k=1)
        return np.atleast_1d(d), np.atleast_1d(i).astype(np.intp)

    def neighbor_counts(self, radius: float) -> NDArray[np.intp]:
        """Per-point count of neighbors within radius, excluding the point itself."""
        if self._tree is None:
            return np.empty(0, dtype=np.intp)
        n = self._tree.query_ball_point(self.points, radius, return_length=True)
        return np.asarray(n, dtype=np.intp) - 1


def voxel_downsample(points: Points, cell: float) -> Points:
    """Replace each occupied cubic cell by the centroid of its points.

    Cell assignment is floor(coord / cell) per axis. Output points are
    ordered by lexicographic cell index, which makes the operation
    deterministic and idempotent.
    """
    if cell <= 0:
        raise InvariantViolation(f"cell size must be > 0, got {cell}")
    pts = as_points(points)
    if len(pts) == 0:
        return pts
    keys = np.floor(pts / cell).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys_sorted = keys[order]
    pts_sorted = pts[order]
    boundaries = np.any(np.diff(keys_sorted, axis=0) != 0, axis=1)
    starts = np.concatenate(([0], np.nonzero(boundaries)[0] + 1))
    ends = np.concatenate((starts[1:], [len(pts_sorted)]))
    sums = np.add.reduceat(pts_sorted, starts, axis=0)
    counts = (ends - starts).astype(np.float64)
    return sums / counts[:, None]
