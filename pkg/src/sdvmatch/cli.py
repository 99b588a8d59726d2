"""Command-line frontend wiring the pipeline stages into reproducible runs.

Subcommands: synth, downsample, keypoints, describe, match, register,
evaluate, sweep, train. Every run logs its fully resolved configuration,
takes explicit seeds, and writes outputs atomically. Exit codes: 0 on
success, 1 on data/validation errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import evaluation, io, kernels, match, net, train
from .core import SpatialIndex, apply_transform, voxel_downsample
from .errors import (
    DegenerateSupport,
    DimMismatch,
    InvariantViolation,
    NoPairs,
    SdvMatchError,
    UnknownKey,
)
from .sdv import GridConfig, extract_patch

log = logging.getLogger("sdvmatch")

FORWARD_BATCH = 256


def _load_config(args) -> io.RunConfig:
    cfg = io.load_config(args.config) if args.config else io.RunConfig()
    for item in args.set or []:
        key, _, value = item.partition("=")
        key = key.strip()
        names = {f.name: f.type for f in fields(io.RunConfig)}
        if key not in names:
            raise UnknownKey(f"--set: unknown config key '{key}'")
        ann = names[key]
        v = value.strip()
        if ann == "bool":
            if v not in ("true", "false"):
                raise InvariantViolation(f"--set {key}: expected true/false, got {v!r}")
            parsed = v == "true"
        elif ann == "int":
            parsed = int(v)
        elif ann == "float":
            parsed = float(v)
        else:
            parsed = v
        cfg = replace(cfg, **{key: parsed})
    cfg.validate()
    for f in fields(cfg):
        log.info("config %s = %r", f.name, getattr(cfg, f.name))
    log.info("kernel backend: %s", kernels.backend_name())
    return cfg


def _grid_config(cfg: io.RunConfig) -> GridConfig:
    return GridConfig(
        edge=cfg.grid_edge,
        voxels_per_axis=cfg.voxels_per_axis,
        kernel_width=cfg.kernel_width,
        occupancy=cfg.binary_occupancy,
    )


def describe_keypoints(
    points,
    keypoint_indices,
    params: net.NetworkParams,
    cfg: io.RunConfig,
    threads: int = 1,
):
    """Descriptors for the keypoints that admit a reference frame.

    Returns (descriptors float32, kept_indices, skipped_indices); rows of
    the descriptor matrix align with kept_indices. Patch extraction fans
    out over a thread pool and is merged in deterministic index order.
    """
    index = SpatialIndex(points)
    grid_cfg = _grid_config(cfg)

    def one(kp: int):
        try:
            return kp, extract_patch(points, index, int(kp), grid_cfg, cfg.lrf_radius)
        except DegenerateSupport:
            return kp, None

    keypoint_indices = list(int(k) for k in keypoint_indices)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, keypoint_indices))
    else:
        results = [one(k) for k in keypoint_indices]

    kept = [kp for kp, g in results if g is not None]
    skipped = [kp for kp, g in results if g is None]
    grids = [g for _, g in results if g is not None]
    if not grids:
        dim = net.descriptor_dim(params.arch)
        return np.zeros((0, dim), dtype=np.float32), np.asarray(kept, dtype=np.int64), \
            np.asarray(skipped, dtype=np.int64)
    descs = []
    for lo in range(0, len(grids), FORWARD_BATCH):
        batch = np.stack(grids[lo:lo + FORWARD_BATCH])
        d, _ = net.forward(params, batch, train=False)
        descs.append(d.astype(np.float32))
    return np.vstack(descs), np.asarray(kept, dtype=np.int64), np.asarray(skipped, dtype=np.int64)


def _read_kept_keypoints(desc_path: Path, keypoints_path: Path, cloud_size: int):
    """Keypoint indices aligned with descriptor rows (skipped ones removed)."""
    keypoints = io.read_keypoints(keypoints_path, cloud_size)
    sidecar = Path(str(desc_path) + ".skipped")
    if sidecar.exists():
        skipped = set(io.read_keypoints(sidecar, cloud_size).tolist())
        keypoints = np.asarray([k for k in keypoints if k not in skipped], dtype=np.int64)
    return keypoints


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene_cfg = evaluation.SceneConfig(
        surface=args.surface,
        points_per_fragment=args.points,
        noise_sigma=args.noise,
        overlap_target=args.overlap,
        density_keep=args.density_keep,
        extent=args.extent,
        measure_tau_psi=args.measure_tau_psi,
    )
    manifest_lines = []
    for k in range(args.pairs):
        frag_p, frag_q, t_gt, psi = evaluation.make_synthetic_scene(args.seed + k, scene_cfg)
        stem = f"pair_{k:03d}"
        io.write_ply(out / f"{stem}_a.ply", frag_p)
        io.write_ply(out / f"{stem}_b.ply", frag_q)
        io.write_transform(out / f"{stem}_T.txt", t_gt)
        manifest_lines.append(f"{stem}_a.ply {stem}_b.ply {stem}_T.txt")
        log.info("%s: measured overlap %.3f", stem, psi)
    io.atomic_write_text(out / args.manifest_name, "\n".join(manifest_lines) + "\n")
    log.info("wrote %d pairs under %s", args.pairs, out)
    return 0


def _cmd_downsample(args) -> int:
    cloud = io.read_ply(args.cloud)
    filtered = voxel_downsample(cloud, args.cell)
    io.write_ply(args.out, filtered)
    log.info("downsampled %d -> %d points (cell %g m)", len(cloud), len(filtered), args.cell)
    return 0


def _cmd_keypoints(args) -> int:
    cloud = io.read_ply(args.cloud)
    index = SpatialIndex(cloud)
    picked = evaluation.sample_keypoints(
        index, args.count, args.seed,
        min_neighbors=args.min_neighbors, neighbor_radius=args.neighbor_radius,
    )
    io.write_keypoints(args.out, picked)
    log.info("sampled %d keypoints from %d points", len(picked), len(cloud))
    return 0


def _cmd_describe(args) -> int:
    cfg = _load_config(args)
    cloud = io.read_ply(args.cloud)
    keypoints = io.read_keypoints(args.keypoints, len(cloud))
    params = net.load_params(args.weights)
    net.validate_architecture(params.arch, cfg.voxels_per_axis)
    desc, kept, skipped = describe_keypoints(cloud, keypoints, params, cfg, args.threads)
    io.write_descriptors(args.out, desc)
    io.write_keypoints(str(args.out) + ".skipped", skipped)
    log.info("described %d keypoints (%d skipped) -> %s", len(kept), len(skipped), args.out)
    return 0


def _cmd_match(args) -> int:
    desc_p = io.read_descriptors(args.desc_p)
    desc_q = io.read_descriptors(args.desc_q)
    corrs = match.mutual_correspondences(desc_p, desc_q)
    lines = [
        f"{int(i)} {int(j)} {float(d)!r}"
        for i, j, d in zip(corrs.index_p, corrs.index_q, corrs.distances)
    ]
    io.atomic_write_text(args.out, "\n".join(lines) + ("\n" if lines else ""))
    log.info("%d mutual correspondences -> %s", len(corrs), args.out)
    return 0


def _cmd_register(args) -> int:
    cloud_p = io.read_ply(args.cloud_p)
    cloud_q = io.read_ply(args.cloud_q)
    desc_p = io.read_descriptors(args.desc_p)
    desc_q = io.read_descriptors(args.desc_q)
    kp_p = _read_kept_keypoints(Path(args.desc_p), Path(args.keypoints_p), len(cloud_p))
    kp_q = _read_kept_keypoints(Path(args.desc_q), Path(args.keypoints_q), len(cloud_q))
    if len(kp_p) != len(desc_p) or len(kp_q) != len(desc_q):
        raise DimMismatch(
            f"keypoints ({len(kp_p)}, {len(kp_q)}) do not align with descriptor rows "
            f"({len(desc_p)}, {len(desc_q)}); is the .skipped sidecar present?"
        )
    corrs = match.mutual_correspondences(desc_p, desc_q)
    params = match.RansacParams(
        max_iterations=args.max_iterations,
        inlier_distance=args.inlier_distance,
        success_probability=args.probability,
        seed=args.seed,
    )
    transform, inliers = match.ransac_register(
        cloud_p[kp_p], cloud_q[kp_q], corrs, params
    )
    io.write_transform(args.out, transform)
    log.info("registered with %d/%d inliers -> %s", len(inliers), len(corrs), args.out)
    return 0


def _evaluate_pairs(args, cfg: io.RunConfig):
    """Shared by evaluate and sweep: per-pair mutual-NN inlier counting."""
    manifest = train.read_manifest(args.manifest)
    if not manifest:
        raise NoPairs(f"{args.manifest}: empty manifest")
    params = None
    if not args.oracle:
        if not args.weights:
            raise InvariantViolation("either --weights or --oracle is required")
        params = net.load_params(args.weights)
        net.validate_architecture(params.arch, cfg.voxels_per_axis)

    results = []
    for k, entry in enumerate(manifest):
        cloud_p = io.read_ply(entry.cloud_a)
        cloud_q = io.read_ply(entry.cloud_b)
        t_gt = io.read_transform(entry.transform)
        if cfg.downsample_cell > 0:
            cloud_p = voxel_downsample(cloud_p, cfg.downsample_cell)
            cloud_q = voxel_downsample(cloud_q, cfg.downsample_cell)
        psi_pq, psi_qp = match.overlap_both_ways(cloud_p, cloud_q, t_gt, cfg.tau_psi)
        if min(psi_pq, psi_qp) <= args.min_overlap:
            log.info("pair %d (%s, %s): overlap (%.3f, %.3f) below %.2f, skipped",
                     k, entry.cloud_a.name, entry.cloud_b.name, psi_pq, psi_qp,
                     args.min_overlap)
            continue
        kp_p = evaluation.sample_keypoints(
            SpatialIndex(cloud_p), args.keypoint_count, args.seed + 31 * k,
            min_neighbors=args.min_neighbors, neighbor_radius=args.neighbor_radius,
        )
        kp_q = evaluation.sample_keypoints(
            SpatialIndex(cloud_q), args.keypoint_count, args.seed + 31 * k + 1,
            min_neighbors=args.min_neighbors, neighbor_radius=args.neighbor_radius,
        )
        if args.oracle:
            desc_p = cloud_p[kp_p]
            desc_q = apply_transform(cloud_q[kp_q], t_gt)
            kept_p, kept_q = kp_p, kp_q
        else:
            desc_p, kept_p, _ = describe_keypoints(cloud_p, kp_p, params, cfg, args.threads)
            desc_q, kept_q, _ = describe_keypoints(cloud_q, kp_q, params, cfg, args.threads)
        name_a, name_b = entry.cloud_a.name, entry.cloud_b.name
        if len(desc_p) == 0 or len(desc_q) == 0:
            results.append(evaluation.pair_result(name_a, name_b, 0, 0, cfg.tau2))
            continue
        corrs = match.mutual_correspondences(desc_p, desc_q)
        if len(corrs) == 0:
            results.append(evaluation.pair_result(name_a, name_b, 0, 0, cfg.tau2))
            continue
        ratio = evaluation.inlier_ratio(
            corrs, cloud_p[kept_p], cloud_q[kept_q], t_gt, cfg.tau1
        )
        n_inlier = int(round(ratio * len(corrs)))
        results.append(evaluation.pair_result(name_a, name_b, len(corrs), n_inlier, cfg.tau2))
    if not results:
        raise NoPairs("no manifest pair passed the overlap gate")
    return results


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    results = _evaluate_pairs(args, cfg)
    report = evaluation.scene_recall(results, cfg.tau2, scene=args.scene, tau1=cfg.tau1)
    if args.report:
        io.atomic_write_text(args.report, evaluation.report_to_json(report))
    if args.csv:
        io.atomic_write_text(args.csv, evaluation.report_to_csv(report))
    log.info("scene %s: recall %.4f over %d pairs", report.scene, report.recall,
             len(report.pairs))
    print(f"recall {report.recall!r}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    results = _evaluate_pairs(args, cfg)
    tau2_values = [float(v) for v in args.tau2.split(",")]
    curve = evaluation.recall_sweep(results, tau2_values)
    io.atomic_write_text(args.out, evaluation.sweep_to_csv(curve))
    for tau2, recall in curve:
        log.info("tau2 %.3f -> recall %.4f", tau2, recall)
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = train.read_manifest(args.manifest)
    result = train.run_training(
        cfg, manifest, args.seed,
        loss_log_path=args.loss_log,
        checkpoint_dir=args.checkpoint_dir,
    )
    net.save_params(args.out, result.params)
    first = result.loss_log[0][2] if result.loss_log else float("nan")
    last = result.loss_log[-1][2] if result.loss_log else float("nan")
    log.info("trained %d iterations: loss %.4f -> %.4f, weights -> %s",
             len(result.loss_log), first, last, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field (repeatable)")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--oracle", action="store_true",
                   help="use ground-truth-aligned coordinates as descriptors")
    p.add_argument("--keypoint-count", type=int, default=500,
                   help="keypoints sampled per fragment")
    p.add_argument("--min-neighbors", type=int, default=10)
    p.add_argument("--neighbor-radius", type=float, default=0.5)
    p.add_argument("--min-overlap", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sdvmatch",
        description="Point cloud matching with smoothed-density voxel descriptors",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic fragment pairs + manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=6000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--overlap", type=float, default=0.7)
    p.add_argument("--surface", choices=["heightfield", "primitives"], default="heightfield")
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--density-keep", type=float, default=1.0)
    p.add_argument("--measure-tau-psi", type=float, default=0.06)
    p.add_argument("--manifest-name", default="manifest.txt")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("downsample", help="voxel-grid filter a cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--cell", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_downsample)

    p = sub.add_parser("keypoints", help="sample interest point indices")
    p.add_argument("--cloud", required=True)
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-neighbors", type=int, default=10)
    p.add_argument("--neighbor-radius", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_keypoints)

    p = sub.add_parser("describe", help="compute descriptors for keypoints")
    p.add_argument("--cloud", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_describe)

    p = sub.add_parser("match", help="mutual nearest-neighbor correspondences")
    p.add_argument("--desc-p", required=True)
    p.add_argument("--desc-q", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("register", help="RANSAC rigid registration from descriptors")
    p.add_argument("--cloud-p", required=True)
    p.add_argument("--cloud-q", required=True)
    p.add_argument("--keypoints-p", required=True)
    p.add_argument("--keypoints-q", required=True)
    p.add_argument("--desc-p", required=True)
    p.add_argument("--desc-q", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--inlier-distance", type=float, default=0.1)
    p.add_argument("--max-iterations", type=int, default=55000)
    p.add_argument("--probability", type=float, default=0.999)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("evaluate", help="per-pair inlier ratios and scene recall")
    _add_eval_flags(p)
    p.add_argument("--scene", default="scene")
    p.add_argument("--report", default=None, help="JSON report path")
    p.add_argument("--csv", default=None, help="per-pair CSV path")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="recall versus inlier-ratio threshold")
    _add_eval_flags(p)
    p.add_argument("--tau2", required=True, help="comma-separated thresholds")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("train", help="train the descriptor network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-log", default=None)
    p.add_argument("--checkpoint-dir", default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SdvMatchError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
