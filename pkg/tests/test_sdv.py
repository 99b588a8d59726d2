import math

import numpy as np
import pytest

from sdvmatch.core import SpatialIndex
from sdvmatch.errors import DegenerateSupport, InvariantViolation
from sdvmatch.evaluation import random_rotation
from sdvmatch.lrf import Lrf, estimate_lrf
from sdvmatch.sdv import GridConfig, canonicalize, compute_sdv, extract_patch, grid_to_text

from conftest import curved_support

CFG = GridConfig(edge=0.3, voxels_per_axis=16, kernel_width=0.01640625)


def naive_sdv(points, cfg):
    """Independent oracle: full voxel x point distance matrix, no pruning."""
    points = np.asarray(points, dtype=np.float64)
    c, h = cfg.voxels_per_axis, cfg.kernel_width
    if len(points):
        points = points[np.linalg.norm(points, axis=1) <= cfg.support_radius]
    cents = cfg.centroids_1d()
    jj, kk, ll = np.meshgrid(cents, cents, cents, indexing="ij")
    centers = np.stack([jj, kk, ll], axis=-1).reshape(-1, 3)
    values = np.zeros(len(centers))
    if len(points):
        d2 = ((centers[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        inside = d2 < (3.0 * h) ** 2
        counts = inside.sum(axis=1)
        kernels = np.where(inside, np.exp(-d2 / (2 * h * h)) / (math.sqrt(2 * math.pi) * h), 0.0)
        nz = counts > 0
        if cfg.occupancy:
            values[nz] = 1.0
        else:
            values[nz] = kernels.sum(axis=1)[nz] / counts[nz]
    total = values.sum()
    if total > 0:
        values /= total
    return values.reshape(c, c, c)


def identity_lrf():
    return Lrf(np.zeros(3), np.array([1.0, 0, 0]), np.array([0.0, 1, 0]),
               np.array([0.0, 0, 1]))


class TestGridConfig:
    def test_derived_quantities(self):
        assert CFG.voxel_size == 0.3 / 16
        assert math.isclose(CFG.support_radius, math.sqrt(3) / 2 * 0.3)

    def test_kernel_truncation_bound(self):
        with pytest.raises(InvariantViolation):
            GridConfig(edge=0.3, voxels_per_axis=16, kernel_width=0.11)

    def test_bad_resolution(self):
        with pytest.raises(InvariantViolation):
            GridConfig(edge=0.3, voxels_per_axis=1, kernel_width=0.01)


class TestCanonicalize:
    def test_origin_maps_to_zero(self, rng):
        pts = curved_support(rng, 100)
        f = estimate_lrf(pts, SpatialIndex(pts), pts[0], 0.6)
        canon = canonicalize(pts[0][None, :], f)
        np.testing.assert_allclose(canon, 0.0, atol=1e-15)

    def test_identity_frame_is_noop(self, rng):
        pts = rng.uniform(-1, 1, (50, 3))
        np.testing.assert_allclose(canonicalize(pts, identity_lrf()), pts, atol=1e-15)

    def test_isometry(self, rng):
        pts = curved_support(rng, 120)
        f = estimate_lrf(pts, SpatialIndex(pts), pts[3], 0.6)
        canon = canonicalize(pts, f)
        d0 = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d1 = np.linalg.norm(canon[:, None] - canon[None, :], axis=2)
        np.testing.assert_allclose(d0, d1, atol=1e-12)


class TestComputeSdv:
    def test_empty_input(self):
        grid = compute_sdv(np.empty((0, 3)), CFG)
        np.testing.assert_array_equal(grid, 0.0)

    def test_single_point_at_centroid(self):
        # point sits exactly on a voxel centroid; check the raw kernel sums
        cents = CFG.centroids_1d()
        p = np.array([[cents[8], cents[8], cents[8]]])
        grid = compute_sdv(p, CFG)
        h = CFG.kernel_width
        # oracle: un-normalized value per voxel is the kernel at its centroid
        raw = np.zeros_like(grid)
        for j, cx in enumerate(cents):
            for k, cy in enumerate(cents):
                for l, cz in enumerate(cents):
                    d2 = (cx - p[0, 0]) ** 2 + (cy - p[0, 1]) ** 2 + (cz - p[0, 2]) ** 2
                    if d2 < (3 * h) ** 2:
                        raw[j, k, l] = math.exp(-d2 / (2 * h * h)) / (math.sqrt(2 * math.pi) * h)
        center_val = 1.0 / (math.sqrt(2 * math.pi) * h)
        assert math.isclose(raw[8, 8, 8], center_val)
        np.testing.assert_allclose(grid, raw / raw.sum(), atol=1e-12)

    def test_unit_sum(self, rng):
        pts = rng.uniform(-0.12, 0.12, (200, 3))
        grid = compute_sdv(pts, CFG)
        assert abs(grid.sum() - 1.0) < 1e-9
        assert (grid >= 0).all()

    def test_duplication_invariance(self, rng):
        pts = rng.uniform(-0.12, 0.12, (150, 3))
        g1 = compute_sdv(pts, CFG)
        g2 = compute_sdv(np.vstack([pts, pts]), CFG)
        np.testing.assert_allclose(g1, g2, atol=1e-12)

    def test_matches_naive_oracle(self, rng):
        for _ in range(20):
            n = int(rng.integers(0, 400))
            pts = rng.uniform(-0.2, 0.2, (n, 3))
            np.testing.assert_allclose(compute_sdv(pts, CFG), naive_sdv(pts, CFG),
                                       atol=1e-12)

    def test_outside_circumsphere_discarded(self):
        far = np.array([[0.5, 0.5, 0.5]])  # outside r_support = 0.26
        np.testing.assert_array_equal(compute_sdv(far, CFG), 0.0)

    def test_occupancy_variant(self, rng):
        cfg = GridConfig(edge=0.3, voxels_per_axis=16, kernel_width=0.01640625,
                         occupancy=True)
        pts = rng.uniform(-0.12, 0.12, (100, 3))
        grid = compute_sdv(pts, cfg)
        assert abs(grid.sum() - 1.0) < 1e-9
        occupied = grid > 0
        np.testing.assert_allclose(grid[occupied], grid[occupied].flat[0])
        np.testing.assert_allclose(grid, naive_sdv(pts, cfg), atol=1e-12)

    def test_sparsity_below_occupancy_radius_zero(self, rng):
        # smoothing strictly reduces the zero-voxel fraction versus a binary
        # grid whose occupancy uses radius 0 (point-in-cell)
        pts = curved_support(rng, 400, extent=0.25)
        grid = compute_sdv(pts, CFG)
        c, w = CFG.voxels_per_axis, CFG.voxel_size
        inside = pts[np.linalg.norm(pts, axis=1) <= CFG.support_radius]
        idx = np.floor((inside + CFG.edge / 2) / w).astype(int)
        idx = idx[((idx >= 0) & (idx < c)).all(axis=1)]
        occ = np.zeros((c, c, c), dtype=bool)
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        assert np.mean(grid == 0) < np.mean(~occ)


class TestExtractPatch:
    def test_unit_sum(self, rng):
        pts = curved_support(rng, 300)
        idx = SpatialIndex(pts)
        grid = extract_patch(pts, idx, 0, CFG, lrf_radius=0.52)
        assert abs(grid.sum() - 1.0) < 1e-9

    def test_rotation_invariance(self, rng):
        for _ in range(10):
            pts = curved_support(rng, 250)
            r = random_rotation(rng)
            moved = pts @ r.T
            g1 = extract_patch(pts, SpatialIndex(pts), 5, CFG, lrf_radius=0.52)
            g2 = extract_patch(moved, SpatialIndex(moved), 5, CFG, lrf_radius=0.52)
            np.testing.assert_allclose(g1, g2, atol=1e-6)

    def test_degenerate_propagates(self):
        pts = np.zeros((10, 3))
        with pytest.raises(DegenerateSupport):
            extract_patch(pts, SpatialIndex(pts), 0, CFG, lrf_radius=0.5)


class TestGridText:
    def test_x_fastest_order(self):
        c = 2
        grid = np.arange(8, dtype=np.float64).reshape(c, c, c)  # [j, k, l]
        txt = grid_to_text(grid).split()
        # expected order: l slowest, then k, then j fastest
        expected = [grid[j, k, l] for l in range(c) for k in range(c) for j in range(c)]
        assert [float(v) for v in txt] == expected
