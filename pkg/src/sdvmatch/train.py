"""Anchor/positive pair sampling and soft-margin batch-hard training.

The per-batch loss for anchors a_i with positives p_i is

    mean_i ln(1 + exp(||f(a_i) - f(p_i)|| - min_{j != i} ||f(a_i) - f(p_j)||))

with the hardest negative drawn from the other positives of the batch.
Optimization is plain ADAM with an exponentially decayed learning rate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import net
from .core import Points, RigidTransform, SpatialIndex, apply_transform
from .errors import (
    BatchTooSmall,
    DegenerateSupport,
    InsufficientOverlap,
    InvariantViolation,
    SdvMatchError,
    ShapeMismatch,
)
from .io import RunConfig, read_ply, read_transform
from .match import overlap_both_ways
from .sdv import GridConfig, extract_patch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MIN_TRAIN_OVERLAP = 0.3


@dataclass(frozen=True)
class TrainingPair:
    """One anchor grid and its ground-truth positive grid."""

    anchor_grid: NDArray[np.float64]
    positive_grid: NDArray[np.float64]
    frag_i: str
    frag_j: str
    anchor_index: int
    positive_index: int


def grid_config_from_run(cfg: RunConfig) -> GridConfig:
    return GridConfig(
        edge=cfg.grid_edge,
        voxels_per_axis=cfg.voxels_per_axis,
        kernel_width=cfg.kernel_width,
        occupancy=cfg.binary_occupancy,
    )


def sample_training_pairs(
    frag_i: Points,
    frag_j: Points,
    t_gt: RigidTransform,
    n_anchors: int,
    seed: int,
    cfg: RunConfig,
    frag_i_name: str = "frag_i",
    frag_j_name: str = "frag_j",
) -> list[TrainingPair]:
    """Anchors from the overlap of frag_i paired with their nearest
    neighbors in the aligned frag_j, both encoded as density grids.

    `t_gt` maps frag_j coordinates into frag_i's frame. Candidate anchors
    are points of frag_i whose aligned nearest neighbor lies within tau1;
    anchors (or positives) with a degenerate reference frame are skipped,
    so fewer than `n_anchors` pairs may come back.
    """
    psi_ij, psi_ji = overlap_both_ways(frag_i, frag_j, t_gt, cfg.tau_psi)
    if min(psi_ij, psi_ji) <= MIN_TRAIN_OVERLAP:
        raise InsufficientOverlap(
            f"overlap ({psi_ij:.3f}, {psi_ji:.3f}) not above {MIN_TRAIN_OVERLAP}"
        )

    moved_j = apply_transform(frag_j, t_gt)
    moved_index = SpatialIndex(moved_j)
    dist, nn_idx = moved_index.nearest(frag_i)
    candidates = np.nonzero(dist <= cfg.tau1)[0]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(candidates))

    grid_cfg = grid_config_from_run(cfg)
    index_i = SpatialIndex(frag_i)
    index_j = SpatialIndex(frag_j)
    pairs: list[TrainingPair] = []
    for pos in order:
        if len(pairs) >= n_anchors:
            break
        a = int(candidates[pos])
        p = int(nn_idx[a])
        try:
            anchor_grid = extract_patch(frag_i, index_i, a, grid_cfg, cfg.lrf_radius)
            positive_grid = extract_patch(frag_j, index_j, p, grid_cfg, cfg.lrf_radius)
        except DegenerateSupport:
            continue
        pairs.append(TrainingPair(anchor_grid, positive_grid,
                                  frag_i_name, frag_j_name, a, p))
    return pairs


def batch_hard_loss(
    anchor_desc: NDArray[np.float64],
    positive_desc: NDArray[np.float64],
) -> tuple[float, NDArray[np.float64], NDArray[np.float64], NDArray[np.intp]]:
    """Soft-margin batch-hard loss with exact gradients.

    Returns (loss, d_anchor, d_positive, hardest_negative_index). The
    hardest negative for anchor i is the positive j != i at minimal
    distance, ties resolved to the smallest j.
    """
    a = np.asarray(anchor_desc, dtype=np.float64)
    p = np.asarray(positive_desc, dtype=np.float64)
    if a.shape != p.shape:
        raise ShapeMismatch(f"descriptor sets differ in shape: {a.shape} vs {p.shape}")
    n = len(a)
    if n < 2:
        raise BatchTooSmall(f"batch-hard loss needs >= 2 elements, got {n}")

    diff = a[:, None, :] - p[None, :, :]          # (n, n, d)
    dist = np.sqrt(np.sum(diff * diff, axis=2))   # d_ij = ||a_i - p_j||
    d_pos = dist[np.arange(n), np.arange(n)]
    off = dist.copy()
    off[np.arange(n), np.arange(n)] = np.inf
    neg_idx = np.argmin(off, axis=1).astype(np.intp)
    d_neg = off[np.arange(n), neg_idx]

    margin = d_pos - d_neg
    loss = float(np.mean(np.log1p(np.exp(margin))))
    sig = 1.0 / (1.0 + np.exp(-margin))  # d loss_i / d margin_i
    coef = sig / n

    # Unit direction vectors, guarded where a distance is exactly zero.
    def _dir(vec: NDArray[np.float64], d: NDArray[np.float64]) -> NDArray[np.float64]:
        safe = np.where(d > 0, d, 1.0)
        return vec / safe[:, None] * (d > 0)[:, None]

    pos_dir = _dir(diff[np.arange(n), np.arange(n)], d_pos)
    neg_dir = _dir(diff[np.arange(n), neg_idx], d_neg)

    d_anchor = coef[:, None] * (pos_dir - neg_dir)
    d_positive = -coef[:, None] * pos_dir
    np.add.at(d_positive, neg_idx, coef[:, None] * neg_dir)
    return loss, d_anchor, d_positive, neg_idx


@dataclass
class AdamState:
    """First/second moments per trainable tensor plus the step schedule."""

    m: list
    v: list
    step: int
    learning_rate: float
    decay: float
    decay_interval: int

    def effective_lr(self) -> float:
        return self.learning_rate * self.decay ** (self.step // self.decay_interval)


def init_adam(params: net.NetworkParams, learning_rate: float, decay: float,
              decay_interval: int) -> AdamState:
    tensors = params.trainable()
    return AdamState(
        m=[np.zeros_like(t) for t in tensors],
        v=[np.zeros_like(t) for t in tensors],
        step=0,
        learning_rate=learning_rate,
        decay=decay,
        decay_interval=decay_interval,
    )


def adam_step(params: net.NetworkParams, grads: net.ParamGradients,
              state: AdamState) -> tuple[net.NetworkParams, AdamState]:
    """One ADAM update in place; returns the same objects for chaining.

    The effective learning rate is lr * decay^(step // interval) evaluated
    at the updated step counter.
    """
    tensors = params.trainable()
    gradients = grads.trainable()
    if len(tensors) != len(gradients):
        raise ShapeMismatch("gradient structure does not match parameters")
    lr = state.learning_rate * state.decay ** (state.step // state.decay_interval)
    state.step += 1
    t = state.step
    for i, (theta, g) in enumerate(zip(tensors, gradients)):
        if theta.shape != g.shape:
            raise ShapeMismatch(f"tensor {i}: {theta.shape} vs gradient {g.shape}")
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[i] / (1.0 - ADAM_BETA1**t)
        v_hat = state.v[i] / (1.0 - ADAM_BETA2**t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return params, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestPair:
    cloud_a: Path
    cloud_b: Path
    transform: Path


def read_manifest(path: str | Path) -> list[ManifestPair]:
    """Lines of `frag_a.ply frag_b.ply transform.txt`, relative to the file."""
    path = Path(path)
    base = path.parent
    pairs = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise InvariantViolation(
                f"{path}: line {lineno}: expected 'frag_a frag_b transform', got {len(parts)} fields"
            )
        pairs.append(ManifestPair(base / parts[0], base / parts[1], base / parts[2]))
    return pairs


def _interleave(pools: list[list[TrainingPair]]) -> list[TrainingPair]:
    out = []
    longest = max(len(p) for p in pools)
    for k in range(longest):
        for pool in pools:
            if k < len(pool):
                out.append(pool[k])
    return out


@dataclass
class TrainResult:
    params: net.NetworkParams
    loss_log: list  # rows (iteration, epoch, loss, lr)


def run_training(
    cfg: RunConfig,
    manifest: list[ManifestPair],
    seed: int,
    loss_log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    arch: net.Architecture | None = None,
) -> TrainResult:
    """Train the descriptor network on the manifest's fragment pairs.

    Deterministic for a fixed seed: pair sampling, epoch shuffling, and
    dropout all derive from it. A non-finite loss aborts with a diagnostic
    dump next to the loss log.
    """
    if not manifest:
        raise InvariantViolation("training manifest is empty")
    if arch is None:
        arch = net.architecture_from_preset(
            cfg.arch_preset, cfg.voxels_per_axis, cfg.descriptor_dim, cfg.dropout_rate
        )
    net.validate_architecture(arch, cfg.voxels_per_axis)

    pools: list[list[TrainingPair]] = []
    for k, entry in enumerate(manifest):
        frag_a = read_ply(entry.cloud_a)
        frag_b = read_ply(entry.cloud_b)
        t_gt = read_transform(entry.transform)
        pairs = sample_training_pairs(
            frag_a, frag_b, t_gt, cfg.anchors_per_pair, seed + 7919 * (k + 1), cfg,
            frag_i_name=entry.cloud_a.name, frag_j_name=entry.cloud_b.name,
        )
        if pairs:
            pools.append(pairs)
    if not pools:
        raise InsufficientOverlap("no training pairs could be sampled from the manifest")

    params = net.init_params(arch, seed)
    state = init_adam(params, cfg.learning_rate, cfg.lr_decay, cfg.lr_decay_interval)

    loss_log: list[tuple[int, int, float, float]] = []
    iteration = 0
    max_iters = cfg.max_iterations if cfg.max_iterations > 0 else None
    done = False
    for epoch in range(1, cfg.epochs + 1):
        epoch_rng = np.random.default_rng([seed, 1009, epoch])
        shuffled = [list(pool) for pool in pools]
        for pool in shuffled:
            epoch_rng.shuffle(pool)
        schedule = _interleave(shuffled)
        for lo in range(0, len(schedule), cfg.batch_size):
            batch = schedule[lo:lo + cfg.batch_size]
            if len(batch) < 2:
                continue
            iteration += 1
            n = len(batch)
            # Anchors and positives share one forward pass so both siamese
            # branches see identical batch statistics; separate passes would
            # shift corresponding descriptors apart by the stats mismatch.
            grids = np.stack([b.anchor_grid for b in batch]
                             + [b.positive_grid for b in batch])
            desc, cache = net.forward(
                params, grids, train=True, dropout_seed=seed * 1000003 + iteration
            )
            loss, d_a, d_p, _ = batch_hard_loss(desc[:n], desc[n:])
            lr_now = state.effective_lr()
            if not np.isfinite(loss):
                _dump_diagnostics(loss_log_path, iteration, epoch, loss, batch, params)
                raise SdvMatchError(
                    f"non-finite loss {loss} at iteration {iteration}; diagnostics dumped"
                )
            grads = net.backward(params, cache, np.concatenate([d_a, d_p]))
            adam_step(params, grads, state)
            loss_log.append((iteration, epoch, loss, lr_now))
            if max_iters is not None and iteration >= max_iters:
                done = True
                break
        if checkpoint_dir is not None:
            ckpt = Path(checkpoint_dir)
            ckpt.mkdir(parents=True, exist_ok=True)
            net.save_params(ckpt / f"epoch_{epoch:03d}.sdvw", params)
        if done:
            break

    if loss_log_path is not None:
        write_loss_log(loss_log_path, loss_log)
    return TrainResult(params, loss_log)


def write_loss_log(path: str | Path, rows) -> None:
    from .io import atomic_write_text

    lines = ["iteration,epoch,loss,lr"]
    for iteration, epoch, loss, lr in rows:
        lines.append(f"{iteration},{epoch},{loss!r},{lr!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def _dump_diagnostics(loss_log_path, iteration, epoch, loss, batch, params) -> None:
    target = Path(loss_log_path).with_suffix(".diagnostic.json") if loss_log_path \
        else Path("train.diagnostic.json")
    doc = {
        "iteration": iteration,
        "epoch": epoch,
        "loss": repr(loss),
        "batch": [
            {"frag_i": b.frag_i, "frag_j": b.frag_j,
             "anchor": b.anchor_index, "positive": b.positive_index}
            for b in batch
        ],
        "param_norms": [float(np.linalg.norm(t)) for t in params.trainable()],
    }
    try:
        target.write_text(json.dumps(doc, indent=2, sort_keys=True))
    except OSError:
        pass
