"""Evaluation protocol: inlier ratios, per-scene recall, RANSAC analysis.

Also hosts the synthetic-scene generator that stands in for external
benchmark data at desk scale, plus the keypoint sampling rule and the
report serializers (JSON and CSV).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import Points, RigidTransform, SpatialIndex, apply_transform, invert
from .errors import EmptyCorrespondences, InvariantViolation, NoPairs
from .match import CorrespondenceSet, overlap


@dataclass(frozen=True)
class PairResult:
    frag_a: str
    frag_b: str
    n_corr: int
    n_inlier: int
    ratio: float
    passed: bool


@dataclass(frozen=True)
class SceneReport:
    scene: str
    pairs: tuple[PairResult, ...]
    recall: float
    tau1: float
    tau2: float


def inlier_ratio(
    corrs: CorrespondenceSet,
    kp_p: Points,
    kp_q: Points,
    t_gt: RigidTransform,
    tau1: float,
) -> float:
    """Fraction of correspondences aligned by the ground truth within tau1."""
    if len(corrs) == 0:
        raise EmptyCorrespondences("inlier ratio undefined for zero correspondences")
    moved = apply_transform(np.asarray(kp_q)[corrs.index_q], t_gt)
    d = np.linalg.norm(np.asarray(kp_p)[corrs.index_p] - moved, axis=1)
    return float(np.mean(d < tau1))


def pair_result(frag_a: str, frag_b: str, n_corr: int, n_inlier: int,
                tau2: float) -> PairResult:
    """Build a pair record; a pair with no correspondences counts as failed."""
    ratio = n_inlier / n_corr if n_corr > 0 else 0.0
    return PairResult(frag_a, frag_b, n_corr, n_inlier, ratio, ratio > tau2)


def scene_recall(pairs, tau2: float, scene: str = "scene",
                 tau1: float = 0.1) -> SceneReport:
    """Average recall: fraction of pairs whose ratio strictly exceeds tau2."""
    pairs = tuple(pairs)
    if not pairs:
        raise NoPairs("scene recall needs at least one fragment pair")
    rescored = tuple(
        PairResult(p.frag_a, p.frag_b, p.n_corr, p.n_inlier, p.ratio, p.ratio > tau2)
        for p in pairs
    )
    recall = float(np.mean([p.passed for p in rescored]))
    return SceneReport(scene, rescored, recall, tau1, tau2)


def recall_sweep(pairs, tau2_values) -> list[tuple[float, float]]:
    """Recall at each threshold; the curve is checked to be non-increasing."""
    curve = []
    for tau2 in tau2_values:
        if not 0 < tau2 <= 1:
            raise InvariantViolation(f"tau2 must be in (0, 1], got {tau2}")
        curve.append((float(tau2), scene_recall(pairs, tau2).recall))
    recalls = [r for _, r in curve]
    assert all(a >= b for a, b in zip(recalls, recalls[1:])), \
        "recall must be non-increasing in tau2"
    return curve


def ransac_iterations(tau2: float, n: int, p: float) -> int:
    """Iterations for RANSAC to draw one all-inlier sample with confidence p.

    Evaluates log(1 - p) / log(1 - tau2^n), truncated to an integer and
    floored at one iteration.
    """
    if not 0 < tau2 < 1:
        raise InvariantViolation(f"inlier ratio must be in (0, 1), got {tau2}")
    if n < 1:
        raise InvariantViolation(f"sample size must be >= 1, got {n}")
    if not 0 < p < 1:
        raise InvariantViolation(f"success probability must be in (0, 1), got {p}")
    k = math.log(1.0 - p) / math.log(1.0 - tau2**n)
    return max(1, int(k))


# ---------------------------------------------------------------------------
# keypoint sampling
# ---------------------------------------------------------------------------

def sample_keypoints(
    index: SpatialIndex,
    count: int,
    seed: int,
    min_neighbors: int = 10,
    neighbor_radius: float = 0.5,
) -> NDArray[np.int64]:
    """Uniform random interest points with more than `min_neighbors`
    neighbors inside `neighbor_radius` (so frames are estimable).

    Returns sorted unique indices; fewer than `count` when the cloud has
    too few eligible points.
    """
    counts = index.neighbor_counts(neighbor_radius)
    eligible = np.nonzero(counts > min_neighbors)[0]
    if len(eligible) == 0:
        return np.empty(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    take = min(count, len(eligible))
    picked = rng.choice(eligible, size=take, replace=False)
    return np.sort(picked).astype(np.int64)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    """Two partially overlapping samplings of one synthetic surface.

    Bump amplitude and width are relative to the extent; narrow, tall
    bumps give surfaces enough asymmetric curvature for reference frames
    to be repeatable across the two samplings.
    """

    surface: str = "heightfield"  # or "primitives"
    points_per_fragment: int = 8000
    noise_sigma: float = 0.0
    overlap_target: float = 0.7
    density_keep: float = 1.0
    extent: float = 1.0
    measure_tau_psi: float = 0.06
    bump_count: int = 100
    bump_amplitude: float = 0.12
    bump_width_min: float = 0.015
    bump_width_max: float = 0.05
    bump_aspect_max: float = 4.0
    bump_positive_fraction: float = 0.5  # hills vs dales mix (asymmetry feeds the x-axis)
    dome_curvature: float = 0.0  # optional global dome (1/m)

    def __post_init__(self) -> None:
        if self.surface not in ("heightfield", "primitives"):
            raise InvariantViolation(f"unknown surface type '{self.surface}'")
        if self.points_per_fragment < 1:
            raise InvariantViolation("points_per_fragment must be >= 1")
        if self.noise_sigma < 0:
            raise InvariantViolation("noise_sigma must be >= 0")
        if not 0 < self.overlap_target <= 1:
            raise InvariantViolation("overlap_target must be in (0, 1]")
        if not 0 < self.density_keep <= 1:
            raise InvariantViolation("density_keep must be in (0, 1]")
        if self.extent <= 0:
            raise InvariantViolation("extent must be > 0")
        if self.measure_tau_psi <= 0:
            raise InvariantViolation("measure_tau_psi must be > 0")
        if self.bump_count < 1:
            raise InvariantViolation("bump_count must be >= 1")
        if self.bump_amplitude <= 0:
            raise InvariantViolation("bump_amplitude must be > 0")
        if not 0 < self.bump_width_min <= self.bump_width_max:
            raise InvariantViolation("need 0 < bump_width_min <= bump_width_max")
        if self.bump_aspect_max < 1:
            raise InvariantViolation("bump_aspect_max must be >= 1")
        if not 0 <= self.bump_positive_fraction <= 1:
            raise InvariantViolation("bump_positive_fraction must be in [0, 1]")
        if self.dome_curvature < 0:
            raise InvariantViolation("dome_curvature must be >= 0")


def random_rotation(rng: np.random.Generator) -> NDArray[np.float64]:
    """Proper rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _heightfield(rng: np.random.Generator, cfg: "SceneConfig"):
    """Sum of randomly oriented anisotropic Gaussian bumps.

    Elongated, sharp bumps give every neighborhood asymmetric curvature,
    which keeps the in-plane reference axis repeatable between the two
    fragment samplings.
    """
    extent = cfg.extent
    n = cfg.bump_count
    centers = rng.uniform(-0.2 * extent, 1.8 * extent, size=(n, 2))
    signs = np.where(rng.random(n) < cfg.bump_positive_fraction, 1.0, -1.0)
    amps = signs * rng.uniform(0.25, 1.0, size=n) * cfg.bump_amplitude * extent
    theta = rng.uniform(0.0, np.pi, size=n)
    w_major = rng.uniform(cfg.bump_width_min, cfg.bump_width_max, size=n) * extent
    w_minor = w_major / rng.uniform(1.0, cfg.bump_aspect_max, size=n)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    mid = np.array([extent * 0.5 * (1.0 + (1.0 - cfg.overlap_target)), extent * 0.5])

    def f(xy: np.ndarray) -> np.ndarray:
        z = -cfg.dome_curvature * np.sum((xy - mid) ** 2, axis=1)
        for i in range(n):
            d = xy - centers[i]
            u = d[:, 0] * cos_t[i] + d[:, 1] * sin_t[i]
            v = -d[:, 0] * sin_t[i] + d[:, 1] * cos_t[i]
            z += amps[i] * np.exp(-0.5 * ((u / w_major[i]) ** 2 + (v / w_minor[i]) ** 2))
        return z

    def sampler(r: np.random.Generator, count: int, x_lo: float, x_hi: float):
        xy = np.column_stack([
            r.uniform(x_lo, x_hi, size=count),
            r.uniform(0.0, extent, size=count),
        ])
        return np.column_stack([xy, f(xy)])

    return sampler


def _primitives(rng: np.random.Generator, cfg: "SceneConfig"):
    extent = cfg.extent
    n_spheres = int(rng.integers(5, 9))
    centers = rng.uniform(0.0, 1.6 * extent, size=(n_spheres, 3))
    centers[:, 2] = rng.uniform(0.1, 0.35, size=n_spheres) * extent
    radii = rng.uniform(0.1, 0.25, size=n_spheres) * extent
    weights = radii**2 / np.sum(radii**2)

    def sampler(r: np.random.Generator, count: int, x_lo: float, x_hi: float):
        out = np.empty((0, 3))
        # Rejection sampling against the x-window; mix in a ground plane.
        while len(out) < count:
            m = max(4 * (count - len(out)), 256)
            on_plane = r.random(m) < 0.35
            which = r.choice(n_spheres, size=m, p=weights)
            dirs = r.standard_normal((m, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            pts = centers[which] + radii[which, None] * dirs
            plane = np.column_stack([
                r.uniform(x_lo - 0.1, x_hi + 0.1, size=m),
                r.uniform(0.0, extent, size=m),
                np.zeros(m),
            ])
            pts = np.where(on_plane[:, None], plane, pts)
            keep = (pts[:, 0] >= x_lo) & (pts[:, 0] <= x_hi)
            out = np.vstack([out, pts[keep]])
        return out[:count]

    return sampler


def make_synthetic_scene(
    seed: int, cfg: SceneConfig
) -> tuple[Points, Points, RigidTransform, float]:
    """Generate (fragment P, fragment Q, T_gt, measured overlap).

    Both fragments sample the same surface; Q's stored coordinates carry a
    random rigid motion, and T_gt maps them back into P's frame. Gaussian
    noise of sigma `noise_sigma` is added independently per coordinate.
    The returned overlap is the smaller of the two directional fractions.
    """
    rng = np.random.default_rng(seed)
    make_sampler = _heightfield if cfg.surface == "heightfield" else _primitives
    sampler = make_sampler(rng, cfg)

    shift = (1.0 - cfg.overlap_target) * cfg.extent
    p_world = sampler(rng, cfg.points_per_fragment, 0.0, cfg.extent)
    q_world = sampler(rng, cfg.points_per_fragment, shift, cfg.extent + shift)

    if cfg.noise_sigma > 0:
        p_world = p_world + rng.normal(scale=cfg.noise_sigma, size=p_world.shape)
        q_world = q_world + rng.normal(scale=cfg.noise_sigma, size=q_world.shape)

    if cfg.density_keep < 1.0:
        keep_p = np.sort(rng.choice(
            len(p_world), size=max(1, int(cfg.density_keep * len(p_world))), replace=False
        ))
        keep_q = np.sort(rng.choice(
            len(q_world), size=max(1, int(cfg.density_keep * len(q_world))), replace=False
        ))
        p_world = p_world[keep_p]
        q_world = q_world[keep_q]

    motion = RigidTransform(
        random_rotation(rng), rng.uniform(-0.5 * cfg.extent, 0.5 * cfg.extent, size=3)
    )
    q_stored = apply_transform(q_world, motion)
    t_gt = invert(motion)

    psi_pq = overlap(p_world, q_stored, t_gt, cfg.measure_tau_psi)
    psi_qp = overlap(q_stored, p_world, invert(t_gt), cfg.measure_tau_psi)
    return p_world, q_stored, t_gt, min(psi_pq, psi_qp)


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------

def report_to_json(report: SceneReport) -> str:
    doc = {
        "scene": report.scene,
        "tau1": report.tau1,
        "tau2": report.tau2,
        "recall": report.recall,
        "pairs": [
            {
                "frag_a": p.frag_a,
                "frag_b": p.frag_b,
                "n_corr": p.n_corr,
                "n_inlier": p.n_inlier,
                "ratio": p.ratio,
                "pass": p.passed,
            }
            for p in report.pairs
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_to_csv(report: SceneReport) -> str:
    lines = ["scene,frag_a,frag_b,n_corr,n_inlier,ratio,pass"]
    for p in report.pairs:
        lines.append(
            f"{report.scene},{p.frag_a},{p.frag_b},{p.n_corr},{p.n_inlier},"
            f"{p.ratio!r},{int(p.passed)}"
        )
    return "\n".join(lines) + "\n"


def sweep_to_csv(curve) -> str:
    lines = ["tau2,recall"]
    for tau2, recall in curve:
        lines.append(f"{tau2!r},{recall!r}")
    return "\n".join(lines) + "\n"
