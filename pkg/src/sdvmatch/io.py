"""File formats: PLY clouds, descriptor sets, keypoint lists, configs.

Every format round-trips exactly and every reader turns malformed input
into a typed error (never an uncaught parse crash). Binary payloads are
little-endian; descriptor files store 32-bit floats.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .core import Points, as_points
from .errors import (
    BadMagic,
    DimMismatch,
    InvariantViolation,
    MalformedHeader,
    MissingCoordinateProperty,
    TruncatedPayload,
    UnknownKey,
    UnsupportedEncoding,
)

DESCRIPTOR_MAGIC = b"SDVD"
DESCRIPTOR_VERSION = 1


# ---------------------------------------------------------------------------
# atomic writes
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write via a temp file in the target directory plus rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read_text(path: str | Path) -> str:
    # Tolerate arbitrary bytes; parsers report typed errors on bad content.
    return Path(path).read_bytes().decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# PLY point clouds
# ---------------------------------------------------------------------------

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def read_ply(path: str | Path) -> Points:
    """Read vertex coordinates from an ascii or binary-little-endian PLY.

    Only the vertex element is consumed; other properties are skipped and
    trailing elements (faces, ...) are ignored. Coordinate properties x, y,
    z must be float or double.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    if not data.startswith(b"ply"):
        raise MalformedHeader(f"{path}: byte 0: file does not start with 'ply'")

    end = data.find(b"end_header")
    if end < 0:
        raise MalformedHeader(f"{path}: no end_header line found")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise MalformedHeader(f"{path}: end_header line is not terminated")
    body_offset = nl + 1
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for lineno, raw in enumerate(header_lines, start=1):
        line = raw.strip()
        if not line or line == "ply" or line.startswith("comment") or line.startswith("obj_info"):
            continue
        parts = line.split()
        if parts[0] == "format":
            if len(parts) < 2:
                raise MalformedHeader(f"{path}: line {lineno}: bad format line")
            fmt = parts[1]
            if fmt == "binary_big_endian":
                raise UnsupportedEncoding(f"{path}: line {lineno}: big-endian PLY not supported")
            if fmt not in ("ascii", "binary_little_endian"):
                raise MalformedHeader(f"{path}: line {lineno}: unknown format '{fmt}'")
        elif parts[0] == "element":
            if len(parts) != 3:
                raise MalformedHeader(f"{path}: line {lineno}: bad element line")
            try:
                count = int(parts[2])
            except ValueError:
                raise MalformedHeader(f"{path}: line {lineno}: bad element count '{parts[2]}'")
            elements.append((parts[1], count, []))
        elif parts[0] == "property":
            if not elements:
                raise MalformedHeader(f"{path}: line {lineno}: property before any element")
            if parts[1] == "list":
                elements[-1][2].append(("__list__", " ".join(parts[2:])))
            elif len(parts) == 3:
                elements[-1][2].append((parts[2], parts[1]))
            else:
                raise MalformedHeader(f"{path}: line {lineno}: bad property line")
        else:
            raise MalformedHeader(f"{path}: line {lineno}: unrecognized keyword '{parts[0]}'")

    if fmt is None:
        raise MalformedHeader(f"{path}: missing format line")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise MalformedHeader(f"{path}: no vertex element")
    if elements and elements[0][0] != "vertex":
        raise UnsupportedEncoding(f"{path}: vertex is not the first element")
    _, count, props = vertex

    names = [n for n, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise MissingCoordinateProperty(f"{path}: vertex has no '{axis}' property")
        ptype = dict(props)[axis]
        if ptype not in ("float", "float32", "double", "float64"):
            raise UnsupportedEncoding(f"{path}: coordinate '{axis}' has type '{ptype}'")
    if any(n == "__list__" for n in names):
        raise UnsupportedEncoding(f"{path}: list property in vertex element")

    if fmt == "ascii":
        text = data[body_offset:].decode("ascii", errors="replace")
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if len(rows) < count:
            raise TruncatedPayload(
                f"{path}: header declares {count} vertices, payload has {len(rows)} rows"
            )
        cols = {n: i for i, (n, _) in enumerate(props)}
        out = np.empty((count, 3), dtype=np.float64)
        for r in range(count):
            row = rows[r]
            if len(row) != len(props):
                raise TruncatedPayload(
                    f"{path}: vertex row {r}: expected {len(props)} values, got {len(row)}"
                )
            try:
                out[r, 0] = float(row[cols["x"]])
                out[r, 1] = float(row[cols["y"]])
                out[r, 2] = float(row[cols["z"]])
            except ValueError as exc:
                raise TruncatedPayload(f"{path}: vertex row {r}: {exc}") from exc
    else:
        try:
            dtype = np.dtype([(n, "<" + _PLY_SCALARS[t]) for n, t in props])
        except KeyError as exc:
            raise UnsupportedEncoding(f"{path}: unknown property type {exc}") from exc
        need = count * dtype.itemsize
        avail = len(data) - body_offset
        if avail < need:
            raise TruncatedPayload(
                f"{path}: byte {body_offset}: need {need} payload bytes, have {avail}"
            )
        rec = np.frombuffer(data, dtype=dtype, count=count, offset=body_offset)
        out = np.stack(
            [rec["x"].astype(np.float64), rec["y"].astype(np.float64), rec["z"].astype(np.float64)],
            axis=1,
        )

    if count and not np.all(np.isfinite(out)):
        raise InvariantViolation(f"{path}: non-finite vertex coordinate")
    return np.ascontiguousarray(out)


def write_ply(path: str | Path, points: Points, ascii_format: bool = False) -> None:
    """Write points as PLY with float32 x, y, z vertex properties."""
    pts = as_points(points).astype(np.float32)
    header = [
        "ply",
        "format ascii 1.0" if ascii_format else "format binary_little_endian 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    if ascii_format:
        body = "\n".join(" ".join(repr(float(v)) for v in row) for row in pts)
        text = "\n".join(header) + "\n" + body + ("\n" if len(pts) else "")
        atomic_write_text(path, text)
    else:
        payload = ("\n".join(header) + "\n").encode("ascii") + pts.astype("<f4").tobytes()
        atomic_write_bytes(path, payload)


# ---------------------------------------------------------------------------
# descriptor files
# ---------------------------------------------------------------------------

def write_descriptors(path: str | Path, descriptors) -> None:
    """Binary descriptor matrix: 16-byte header + row-major f32 payload."""
    desc = np.asarray(descriptors, dtype=np.float32)
    if desc.ndim != 2:
        raise DimMismatch(f"descriptor matrix must be 2-D, got shape {desc.shape}")
    count, dim = desc.shape
    header = DESCRIPTOR_MAGIC + struct.pack("<III", DESCRIPTOR_VERSION, count, dim)
    atomic_write_bytes(path, header + desc.astype("<f4").tobytes())


def read_descriptors(path: str | Path, expected_dim: int | None = None) -> NDArray[np.float32]:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise TruncatedPayload(f"{path}: {len(data)} bytes, header needs 16")
    if data[:4] != DESCRIPTOR_MAGIC:
        raise BadMagic(f"{path}: magic {data[:4]!r}, expected {DESCRIPTOR_MAGIC!r}")
    version, count, dim = struct.unpack("<III", data[4:16])
    if version != DESCRIPTOR_VERSION:
        raise BadMagic(f"{path}: unsupported descriptor file version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise DimMismatch(f"{path}: dimension {dim}, expected {expected_dim}")
    need = count * dim * 4
    if len(data) - 16 < need:
        raise TruncatedPayload(f"{path}: byte 16: need {need} payload bytes, have {len(data) - 16}")
    return np.frombuffer(data, dtype="<f4", count=count * dim, offset=16).reshape(count, dim).copy()


# ---------------------------------------------------------------------------
# keypoint index files
# ---------------------------------------------------------------------------

def write_keypoints(path: str | Path, indices) -> None:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    atomic_write_text(path, "".join(f"{i}\n" for i in idx))


def read_keypoints(path: str | Path, cloud_size: int | None = None) -> NDArray[np.int64]:
    """Newline-separated decimal indices; validated against the cloud size."""
    out = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            v = int(line)
        except ValueError as exc:
            raise InvariantViolation(f"{path}: line {lineno}: not an integer: {line!r}") from exc
        if v < 0:
            raise InvariantViolation(f"{path}: line {lineno}: negative index {v}")
        out.append(v)
    idx = np.asarray(out, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise InvariantViolation(f"{path}: duplicate keypoint indices")
    if cloud_size is not None and len(idx) and idx.max() >= cloud_size:
        raise InvariantViolation(
            f"{path}: index {idx.max()} out of range for cloud of {cloud_size} points"
        )
    return idx


# ---------------------------------------------------------------------------
# transform files (4x4 row-major homogeneous matrix, whitespace separated)
# ---------------------------------------------------------------------------

def write_transform(path: str | Path, transform) -> None:
    from .core import RigidTransform

    m = transform.matrix() if isinstance(transform, RigidTransform) else np.asarray(transform)
    lines = [" ".join(repr(float(v)) for v in row) for row in m]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_transform(path: str | Path):
    from .core import RigidTransform

    values = _read_text(path).split()
    if len(values) != 16:
        raise InvariantViolation(f"{path}: expected 16 numbers, got {len(values)}")
    try:
        m = np.asarray([float(v) for v in values], dtype=np.float64).reshape(4, 4)
    except ValueError as exc:
        raise InvariantViolation(f"{path}: {exc}") from exc
    if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
        raise InvariantViolation(f"{path}: last row is not [0 0 0 1]")
    return RigidTransform.from_matrix(m)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Every tunable of the pipeline, serialized as key = value text.

    Defaults are the indoor-scan profile; :meth:`eth_profile` returns the
    outdoor-scan variant (1 m grid, 2 cm voxel-filter preprocessing).
    """

    grid_edge: float = 0.3
    voxels_per_axis: int = 16
    kernel_width: float = 0.01640625  # 1.75 * voxel_size / 2
    lrf_radius: float = math.sqrt(3.0) * 0.3
    descriptor_dim: int = 32
    arch_preset: str = "standard"
    binary_occupancy: bool = False
    downsample_cell: float = 0.0  # 0 disables the preprocessing filter
    learning_rate: float = 0.001
    lr_decay: float = 0.95
    lr_decay_interval: int = 5000
    batch_size: int = 256
    epochs: int = 20
    max_iterations: int = 0  # 0 = no cap
    anchors_per_pair: int = 300
    dropout_rate: float = 0.3
    ransac_max_iterations: int = 55000
    ransac_inlier_distance: float = 0.1
    ransac_success_probability: float = 0.999
    tau1: float = 0.1
    tau2: float = 0.05
    tau_psi: float = 0.06

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.grid_edge > 0, "grid_edge > 0"),
            (self.voxels_per_axis >= 2, "voxels_per_axis >= 2"),
            (self.kernel_width > 0, "kernel_width > 0"),
            (
                self.lrf_radius >= math.sqrt(3.0) / 2.0 * self.grid_edge - 1e-12,
                "lrf_radius >= sqrt(3)/2 * grid_edge",
            ),
            (self.descriptor_dim >= 1, "descriptor_dim >= 1"),
            (self.arch_preset in ("standard", "compact"), "arch_preset in {standard, compact}"),
            (self.downsample_cell >= 0, "downsample_cell >= 0"),
            (self.learning_rate > 0, "learning_rate > 0"),
            (0 < self.lr_decay <= 1, "0 < lr_decay <= 1"),
            (self.lr_decay_interval >= 1, "lr_decay_interval >= 1"),
            (self.batch_size >= 2, "batch_size >= 2"),
            (self.epochs >= 1, "epochs >= 1"),
            (self.max_iterations >= 0, "max_iterations >= 0"),
            (self.anchors_per_pair >= 1, "anchors_per_pair >= 1"),
            (0 <= self.dropout_rate < 1, "0 <= dropout_rate < 1"),
            (self.ransac_max_iterations >= 1, "ransac_max_iterations >= 1"),
            (self.ransac_inlier_distance > 0, "ransac_inlier_distance > 0"),
            (
                0 < self.ransac_success_probability < 1,
                "0 < ransac_success_probability < 1",
            ),
            (self.tau1 > 0, "tau1 > 0"),
            (0 < self.tau2 <= 1, "0 < tau2 <= 1"),
            (self.tau_psi > 0, "tau_psi > 0"),
        ]
        for ok, constraint in checks:
            if not ok:
                raise InvariantViolation(f"config violates: {constraint}")

    @classmethod
    def eth_profile(cls) -> "RunConfig":
        w = 1.0 / 16
        return cls(
            grid_edge=1.0,
            kernel_width=1.75 * w / 2.0,
            lrf_radius=math.sqrt(3.0),
            downsample_cell=0.02,
        )


def save_config(path: str | Path, cfg: RunConfig) -> None:
    cfg.validate()
    lines = ["# sdvmatch run configuration"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_config(path: str | Path) -> RunConfig:
    """Parse key = value text; unknown keys are an error, '#' starts a comment."""
    known = {f.name: f.type for f in fields(RunConfig)}
    values: dict = {}
    for lineno, raw in enumerate(_read_text(path).splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvariantViolation(f"{path}: line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise UnknownKey(f"{path}: line {lineno}: unknown key '{key}'")
        if key in values:
            raise UnknownKey(f"{path}: line {lineno}: duplicate key '{key}'")
        ann = known[key]
        try:
            if ann == "bool":
                if val not in ("true", "false"):
                    raise ValueError(f"expected true/false, got {val!r}")
                values[key] = val == "true"
            elif ann == "int":
                values[key] = int(val)
            elif ann == "float":
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise InvariantViolation(f"{path}: line {lineno}: {exc}") from exc
    return RunConfig(**values)
