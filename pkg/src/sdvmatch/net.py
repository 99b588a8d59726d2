"""Fully-convolutional 3D descriptor network, hand-rolled in numpy.

The stack is conv3d / batchnorm / relu / dropout / l2norm layers; strided
convolutions do the downsampling and the final l2 normalization emits unit
descriptors. Batchnorm affine parameters are fixed at scale 1, shift 0 and
never trained; only convolution weights and biases are trainable. All math
runs in float64; weight files store float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import kernels
from .errors import BadArchitecture, BadMagic, ShapeMismatch, StaleCache, TruncatedPayload, VersionMismatch
from .io import atomic_write_bytes

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
L2_EPS = 1e-12

WEIGHTS_MAGIC = b"SDVW"
WEIGHTS_VERSION = 1

_KIND_CODES = {"conv3d": 0, "batchnorm": 1, "relu": 2, "dropout": 3, "l2norm": 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    rate: float = 0.0
    channels: int = 0


def conv(in_channels: int, out_channels: int, kernel: int, stride: int = 1,
         padding: int = 0) -> LayerSpec:
    return LayerSpec("conv3d", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding)


def batchnorm(channels: int) -> LayerSpec:
    return LayerSpec("batchnorm", channels=channels)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def l2norm() -> LayerSpec:
    return LayerSpec("l2norm")


Architecture = tuple[LayerSpec, ...]


def standard_architecture(grid_resolution: int = 16, dim: int = 32,
                          dropout_rate: float = 0.3) -> Architecture:
    """Six 3x3x3 conv blocks (two strided) plus the dim-channel head."""
    if grid_resolution % 4 != 0:
        raise BadArchitecture(f"grid resolution {grid_resolution} not divisible by 4")
    head = grid_resolution // 4
    layers = []
    chain = [(1, 32, 1), (32, 32, 1), (32, 64, 2), (64, 64, 1), (64, 128, 2), (128, 128, 1)]
    for cin, cout, stride in chain:
        layers += [conv(cin, cout, 3, stride=stride, padding=1), batchnorm(cout), relu()]
    layers += [dropout(dropout_rate), conv(128, dim, head), batchnorm(dim), l2norm()]
    return tuple(layers)


def compact_architecture(grid_resolution: int = 16, dim: int = 16,
                         dropout_rate: float = 0.3) -> Architecture:
    """Small stack for desk-scale experiments; same layer grammar."""
    if grid_resolution % 4 != 0:
        raise BadArchitecture(f"grid resolution {grid_resolution} not divisible by 4")
    head = grid_resolution // 4
    return (
        conv(1, 8, 3, stride=2, padding=1), batchnorm(8), relu(),
        conv(8, 16, 3, stride=2, padding=1), batchnorm(16), relu(),
        conv(16, 32, 3, stride=1, padding=1), batchnorm(32), relu(),
        dropout(dropout_rate),
        conv(32, dim, head), batchnorm(dim), l2norm(),
    )


def architecture_from_preset(preset: str, grid_resolution: int, dim: int,
                             dropout_rate: float = 0.3) -> Architecture:
    if preset == "standard":
        return standard_architecture(grid_resolution, dim, dropout_rate)
    if preset == "compact":
        return compact_architecture(grid_resolution, dim, dropout_rate)
    raise BadArchitecture(f"unknown architecture preset '{preset}'")


def validate_architecture(arch: Architecture, input_resolution: int) -> int:
    """Check the shape chain; returns the descriptor dimension.

    Raises BadArchitecture unless the chain starts at 1 channel, keeps
    channel counts consistent, ends in l2norm, and reduces the spatial
    extent to exactly 1.
    """
    if not arch:
        raise BadArchitecture("empty architecture")
    channels, spatial = 1, input_resolution
    for i, layer in enumerate(arch):
        if layer.kind == "conv3d":
            if layer.kernel < 1:
                raise BadArchitecture(f"layer {i}: kernel must be >= 1")
            if layer.stride not in (1, 2):
                raise BadArchitecture(f"layer {i}: stride must be 1 or 2")
            if layer.padding < 0:
                raise BadArchitecture(f"layer {i}: negative padding")
            if layer.in_channels != channels:
                raise BadArchitecture(
                    f"layer {i}: expects {layer.in_channels} channels, chain has {channels}"
                )
            span = spatial + 2 * layer.padding - layer.kernel
            if span < 0:
                raise BadArchitecture(f"layer {i}: kernel {layer.kernel} exceeds extent {spatial}")
            spatial = span // layer.stride + 1
            channels = layer.out_channels
        elif layer.kind == "batchnorm":
            if layer.channels != channels:
                raise BadArchitecture(
                    f"layer {i}: batchnorm over {layer.channels} channels, chain has {channels}"
                )
        elif layer.kind == "dropout":
            if not 0 <= layer.rate < 1:
                raise BadArchitecture(f"layer {i}: dropout rate {layer.rate} outside [0, 1)")
        elif layer.kind == "l2norm":
            if i != len(arch) - 1:
                raise BadArchitecture(f"layer {i}: l2norm must be the final layer")
        elif layer.kind != "relu":
            raise BadArchitecture(f"layer {i}: unknown kind '{layer.kind}'")
    if arch[-1].kind != "l2norm":
        raise BadArchitecture("architecture must end with l2norm")
    if spatial != 1:
        raise BadArchitecture(f"spatial extent reduces to {spatial}^3, expected 1^3")
    return channels


def descriptor_dim(arch: Architecture) -> int:
    dims = [l.out_channels for l in arch if l.kind == "conv3d"]
    if not dims:
        raise BadArchitecture("architecture has no convolution layers")
    return dims[-1]


@dataclass
class NetworkParams:
    """Per-layer tensors aligned with the architecture tuple.

    Entries are None for layers of the wrong kind. Running statistics
    belong to batchnorm layers; weights and biases to convolutions.
    """

    arch: Architecture
    weights: list
    biases: list
    running_mean: list
    running_var: list

    def trainable(self) -> list[NDArray[np.float64]]:
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out += [w, b]
        return out


@dataclass
class ParamGradients:
    weights: list
    biases: list

    def trainable(self) -> list[NDArray[np.float64]]:
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out += [w, b]
        return out


def init_params(arch: Architecture, seed: int, input_resolution: int | None = None) -> NetworkParams:
    """Orthogonal conv weights (gain 0.6), biases 0.01, unit running stats.

    Each conv weight reshaped to (out, in*k^3) has orthonormal rows, or
    orthonormal columns when out exceeds in*k^3, scaled by the gain.
    Deterministic for a fixed seed.
    """
    if input_resolution is not None:
        validate_architecture(arch, input_resolution)
    rng = np.random.default_rng(seed)
    weights, biases, rmean, rvar = [], [], [], []
    for layer in arch:
        if layer.kind == "conv3d":
            rows = layer.out_channels
            cols = layer.in_channels * layer.kernel**3
            a = rng.standard_normal((max(rows, cols), min(rows, cols)))
            q, r = np.linalg.qr(a)
            q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity
            mat = q.T if rows <= cols else q
            w = 0.6 * mat.reshape(rows, layer.in_channels, layer.kernel, layer.kernel, layer.kernel)
            weights.append(np.ascontiguousarray(w))
            biases.append(np.full(rows, 0.01))
            rmean.append(None)
            rvar.append(None)
        elif layer.kind == "batchnorm":
            weights.append(None)
            biases.append(None)
            rmean.append(np.zeros(layer.channels))
            rvar.append(np.ones(layer.channels))
        else:
            weights.append(None)
            biases.append(None)
            rmean.append(None)
            rvar.append(None)
    return NetworkParams(tuple(arch), weights, biases, rmean, rvar)


@dataclass
class ForwardCache:
    """Train-mode activations needed by backward; tied to one params object."""

    params: NetworkParams
    records: list = field(default_factory=list)


def _as_batch(grids) -> NDArray[np.float64]:
    x = np.asarray(grids, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or not (x.shape[1] == x.shape[2] == x.shape[3]):
        raise ShapeMismatch(f"grids must be (B, c, c, c), got {x.shape}")
    return x


def forward(
    params: NetworkParams,
    grids,
    train: bool = False,
    dropout_seed: int = 0,
) -> tuple[NDArray[np.float64], ForwardCache | None]:
    """Run the network; returns (descriptors, cache-or-None).

    Inference is deterministic: dropout is disabled and batchnorm uses the
    running statistics. Train mode uses batch statistics, updates the
    running statistics in place, and applies inverted dropout seeded by
    `dropout_seed`; it also returns the activation cache for backward.
    """
    x = _as_batch(grids)[:, None, :, :, :]  # (B, 1, c, c, c)
    cache = ForwardCache(params) if train else None
    rng = np.random.default_rng(dropout_seed) if train else None

    for i, layer in enumerate(params.arch):
        if layer.kind == "conv3d":
            if x.shape[1] != layer.in_channels:
                raise ShapeMismatch(
                    f"layer {i}: input has {x.shape[1]} channels, conv expects {layer.in_channels}"
                )
            if x.shape[2] + 2 * layer.padding < layer.kernel:
                raise ShapeMismatch(
                    f"layer {i}: spatial extent {x.shape[2]} too small for kernel {layer.kernel}"
                )
            if train:
                cache.records.append(("conv3d", i, x))
            x = kernels.conv3d_forward(
                x, params.weights[i], params.biases[i], layer.stride, layer.padding
            )
        elif layer.kind == "batchnorm":
            if train:
                mean = x.mean(axis=(0, 2, 3, 4))
                var = x.var(axis=(0, 2, 3, 4))
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (x - mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
                params.running_mean[i] *= BN_MOMENTUM
                params.running_mean[i] += (1.0 - BN_MOMENTUM) * mean
                params.running_var[i] *= BN_MOMENTUM
                params.running_var[i] += (1.0 - BN_MOMENTUM) * var
                cache.records.append(("batchnorm", i, (xhat, inv_std)))
                x = xhat
            else:
                inv_std = 1.0 / np.sqrt(params.running_var[i] + BN_EPS)
                x = (x - params.running_mean[i][None, :, None, None, None]) \
                    * inv_std[None, :, None, None, None]
        elif layer.kind == "relu":
            if train:
                cache.records.append(("relu", i, x > 0))
            x = np.maximum(x, 0.0)
        elif layer.kind == "dropout":
            if train and layer.rate > 0:
                mask = rng.random(x.shape) >= layer.rate
                scale = 1.0 / (1.0 - layer.rate)
                cache.records.append(("dropout", i, (mask, scale)))
                x = x * mask * scale
            elif train:
                cache.records.append(("dropout", i, (None, 1.0)))
        elif layer.kind == "l2norm":
            if x.shape[2:] != (1, 1, 1):
                raise ShapeMismatch(
                    f"layer {i}: l2norm expects 1^3 spatial extent, got {x.shape[2:]}"
                )
            flat = x.reshape(x.shape[0], x.shape[1])
            sq = np.sum(flat * flat, axis=1)
            inv = 1.0 / np.sqrt(sq + L2_EPS)
            if train:
                cache.records.append(("l2norm", i, (flat, inv)))
            x = flat * inv[:, None]
    return x, cache


def backward(params: NetworkParams, cache: ForwardCache | None,
             d_desc: NDArray[np.float64]) -> ParamGradients:
    """Exact gradients of the trainable tensors for a train-mode forward."""
    if cache is None or cache.params is not params:
        raise StaleCache("cache does not belong to a train-mode forward of these params")
    grads = ParamGradients(
        weights=[None if w is None else np.zeros_like(w) for w in params.weights],
        biases=[None if b is None else np.zeros_like(b) for b in params.biases],
    )
    dy = np.asarray(d_desc, dtype=np.float64)
    for kind, i, rec in reversed(cache.records):
        layer = params.arch[i]
        if kind == "l2norm":
            flat, inv = rec
            dot = np.sum(flat * dy, axis=1)
            dy = dy * inv[:, None] - flat * (dot * inv**3)[:, None]
            dy = dy[:, :, None, None, None]
        elif kind == "dropout":
            mask, scale = rec
            if mask is not None:
                dy = dy * mask * scale
        elif kind == "relu":
            dy = dy * rec
        elif kind == "batchnorm":
            xhat, inv_std = rec
            axes = (0, 2, 3, 4)
            mean_dy = dy.mean(axis=axes)
            mean_dy_xhat = (dy * xhat).mean(axis=axes)
            dy = (dy - mean_dy[None, :, None, None, None]
                  - xhat * mean_dy_xhat[None, :, None, None, None]) \
                * inv_std[None, :, None, None, None]
        elif kind == "conv3d":
            x_in = rec
            grads.weights[i] = kernels.conv3d_backward_w(
                x_in, dy, layer.kernel, layer.stride, layer.padding
            )
            grads.biases[i] = dy.sum(axis=(0, 2, 3, 4))
            dy = kernels.conv3d_backward_x(
                params.weights[i], dy, x_in.shape[2], layer.stride, layer.padding
            )
    return grads


# ---------------------------------------------------------------------------
# serialization (magic "SDVW", versioned, little-endian f32 payload)
# ---------------------------------------------------------------------------

def save_params(path: str | Path, params: NetworkParams) -> None:
    chunks = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(params.arch))]
    for i, layer in enumerate(params.arch):
        chunks.append(struct.pack("<I", _KIND_CODES[layer.kind]))
        if layer.kind == "conv3d":
            chunks.append(struct.pack(
                "<5I", layer.in_channels, layer.out_channels, layer.kernel,
                layer.stride, layer.padding,
            ))
            chunks.append(params.weights[i].astype("<f4").tobytes())
            chunks.append(params.biases[i].astype("<f4").tobytes())
        elif layer.kind == "batchnorm":
            chunks.append(struct.pack("<I", layer.channels))
            chunks.append(params.running_mean[i].astype("<f4").tobytes())
            chunks.append(params.running_var[i].astype("<f4").tobytes())
        elif layer.kind == "dropout":
            chunks.append(struct.pack("<f", layer.rate))
    atomic_write_bytes(path, b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayload(
                f"{self.path}: byte {self.pos}: need {n} more bytes, have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def f32_array(self, count: int) -> NDArray[np.float64]:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def load_params(path: str | Path, expected_arch: Architecture | None = None) -> NetworkParams:
    """Read a weight file; the architecture is reconstructed from it.

    When `expected_arch` is given, any disagreement raises ShapeMismatch.
    """
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != WEIGHTS_MAGIC:
        raise BadMagic(f"{path}: not a weight file (magic mismatch)")
    version = r.u32()
    if version != WEIGHTS_VERSION:
        raise VersionMismatch(f"{path}: weight file version {version}, expected {WEIGHTS_VERSION}")
    n_layers = r.u32()
    arch: list[LayerSpec] = []
    weights, biases, rmean, rvar = [], [], [], []
    for _ in range(n_layers):
        code = r.u32()
        if code not in _CODE_KINDS:
            raise ShapeMismatch(f"{path}: unknown layer code {code}")
        kind = _CODE_KINDS[code]
        if kind == "conv3d":
            cin, cout, k, stride, pad = r.u32(5)
            layer = conv(cin, cout, k, stride=stride, padding=pad)
            w = r.f32_array(cout * cin * k**3).reshape(cout, cin, k, k, k)
            b = r.f32_array(cout)
            weights.append(np.ascontiguousarray(w))
            biases.append(b)
            rmean.append(None)
            rvar.append(None)
        elif kind == "batchnorm":
            ch = r.u32()
            layer = batchnorm(ch)
            weights.append(None)
            biases.append(None)
            rmean.append(r.f32_array(ch))
            rvar.append(r.f32_array(ch))
        elif kind == "dropout":
            (rate,) = struct.unpack("<f", r.take(4))
            layer = dropout(float(rate))
            weights.append(None)
            biases.append(None)
            rmean.append(None)
            rvar.append(None)
        else:
            layer = LayerSpec(kind)
            weights.append(None)
            biases.append(None)
            rmean.append(None)
            rvar.append(None)
        arch.append(layer)
    params = NetworkParams(tuple(arch), weights, biases, rmean, rvar)
    if expected_arch is not None:
        if len(expected_arch) != len(params.arch) or any(
            a.kind != b.kind
            or (a.kind == "conv3d" and (a.in_channels, a.out_channels, a.kernel, a.stride, a.padding)
                != (b.in_channels, b.out_channels, b.kernel, b.stride, b.padding))
            or (a.kind == "batchnorm" and a.channels != b.channels)
            for a, b in zip(expected_arch, params.arch)
        ):
            raise ShapeMismatch(f"{path}: stored architecture differs from the expected one")
    return params
