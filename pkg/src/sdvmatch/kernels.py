"""Hot numeric kernels: density-grid accumulation and 3D convolution.

Each kernel has two implementations with identical contracts: a numba
``@njit`` version and a pure-numpy one. Both are exercised against each
other in the test suite, and ``benchmarks/bench_kernels.py`` compares
their speed.

Default routing follows that benchmark: density accumulation runs the
njit scalar loops (order-of-magnitude faster than vectorized numpy),
while the convolutions run the numpy path, which lowers to one BLAS
matmul per kernel offset and outruns naive jitted loops on a single
core. Environment overrides:

* ``SDVMATCH_NO_NUMBA=1``  - pure numpy everywhere (numba never imported)
* ``SDVMATCH_CONV_NUMBA=1``- route the convolutions to the njit loops

All kernels are deterministic: accumulation order is fixed, and the numba
versions parallelize only over independent output slices.
"""

from __future__ import annotations

import math
import os

import numpy as np

_FORCE_NUMPY = os.environ.get("SDVMATCH_NO_NUMBA", "").strip() not in ("", "0")
_CONV_NUMBA = os.environ.get("SDVMATCH_CONV_NUMBA", "").strip() not in ("", "0")

if not _FORCE_NUMPY:
    try:
        from numba import njit, prange

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False


# ---------------------------------------------------------------------------
# Smoothed-density accumulation
#
# For a c^3 grid of edge `edge` centered at the origin, voxel (j, k, l) has
# centroid -edge/2 + (index + 0.5) * w per axis, w = edge / c. Each point
# contributes exp(-d^2 / (2 h^2)) / (sqrt(2 pi) h) to every voxel whose
# centroid lies strictly within 3h; the per-voxel point count is returned
# alongside so the caller can form the mean.
# ---------------------------------------------------------------------------


def _sdv_accumulate_numpy(points: np.ndarray, c: int, edge: float, h: float):
    w = edge / c
    reach = 3.0 * h
    norm = 1.0 / (math.sqrt(2.0 * math.pi) * h)
    ksum = np.zeros((c, c, c), dtype=np.float64)
    count = np.zeros((c, c, c), dtype=np.int64)
    if len(points) == 0:
        return ksum, count

    # Candidate voxel window per point: cells whose centroid can be within
    # reach of the point. m over-covers by design; the exact test is below.
    m = int(math.ceil(reach / w + 0.5)) + 1
    base = np.floor((points + edge / 2.0) / w).astype(np.int64)
    offsets = np.arange(-m, m + 1)
    flat_ksum = ksum.ravel()
    flat_count = count.ravel()
    for oj in offsets:
        jj = base[:, 0] + oj
        okj = (jj >= 0) & (jj < c)
        cx = -edge / 2.0 + (jj + 0.5) * w
        dx2 = (cx - points[:, 0]) ** 2
        for ok in offsets:
            kk = base[:, 1] + ok
            okk = okj & (kk >= 0) & (kk < c)
            cy = -edge / 2.0 + (kk + 0.5) * w
            dxy2 = dx2 + (cy - points[:, 1]) ** 2
            for ol in offsets:
                ll = base[:, 2] + ol
                valid = okk & (ll >= 0) & (ll < c)
                cz = -edge / 2.0 + (ll + 0.5) * w
                d2 = dxy2 + (cz - points[:, 2]) ** 2
                valid &= d2 < reach * reach
                if not np.any(valid):
                    continue
                flat = (jj[valid] * c + kk[valid]) * c + ll[valid]
                np.add.at(flat_ksum, flat, norm * np.exp(-d2[valid] / (2.0 * h * h)))
                np.add.at(flat_count, flat, 1)
    return ksum, count


if NUMBA_ENABLED:

    @njit(cache=True)
    def _sdv_accumulate_numba(points, c, edge, h):  # pragma: no cover - jitted
        w = edge / c
        reach = 3.0 * h
        reach2 = reach * reach
        norm = 1.0 / (math.sqrt(2.0 * math.pi) * h)
        inv2h2 = 1.0 / (2.0 * h * h)
        half = edge / 2.0
        ksum = np.zeros((c, c, c), dtype=np.float64)
        count = np.zeros((c, c, c), dtype=np.int64)
        for i in range(points.shape[0]):
            px, py, pz = points[i, 0], points[i, 1], points[i, 2]
            j0 = max(0, int(math.floor((px - reach + half) / w - 0.5)))
            j1 = min(c - 1, int(math.ceil((px + reach + half) / w - 0.5)))
            k0 = max(0, int(math.floor((py - reach + half) / w - 0.5)))
            k1 = min(c - 1, int(math.ceil((py + reach + half) / w - 0.5)))
            l0 = max(0, int(math.floor((pz - reach + half) / w - 0.5)))
            l1 = min(c - 1, int(math.ceil((pz + reach + half) / w - 0.5)))
            for j in range(j0, j1 + 1):
                dx = (-half + (j + 0.5) * w) - px
                dx2 = dx * dx
                if dx2 >= reach2:
                    continue
                for k in range(k0, k1 + 1):
                    dy = (-half + (k + 0.5) * w) - py
                    dxy2 = dx2 + dy * dy
                    if dxy2 >= reach2:
                        continue
                    for l in range(l0, l1 + 1):
                        dz = (-half + (l + 0.5) * w) - pz
                        d2 = dxy2 + dz * dz
                        if d2 < reach2:
                            ksum[j, k, l] += norm * math.exp(-d2 * inv2h2)
                            count[j, k, l] += 1
        return ksum, count

    def sdv_accumulate(points, c, edge, h):
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        return _sdv_accumulate_numba(pts, c, edge, h)

else:

    def sdv_accumulate(points, c, edge, h):
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        return _sdv_accumulate_numpy(pts, c, edge, h)


sdv_accumulate.__doc__ = """Kernel sums and point counts of the smoothed-density grid.

Returns (ksum, count), both (c, c, c); the caller divides and normalizes.
"""


# ---------------------------------------------------------------------------
# 3D convolution
#
# x: (B, Cin, n, n, n), w: (Cout, Cin, k, k, k), zero padding `pad`,
# stride `stride`. Output spatial size is (n + 2 pad - k) // stride + 1.
# The numpy path loops over the k^3 kernel offsets and runs one BLAS
# matmul against the shifted input slab per offset; the numba path runs
# direct loops.
# ---------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _pad_channel_major(x: np.ndarray, pad: int) -> np.ndarray:
    """(B, C, n, n, n) -> contiguous (C, B, n+2p, n+2p, n+2p)."""
    xc = x.transpose(1, 0, 2, 3, 4)
    if pad == 0:
        return np.ascontiguousarray(xc)
    p = ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))
    return np.pad(xc, p)


def _offset_slab(xc: np.ndarray, kx: int, ky: int, kz: int, stride: int, out: int):
    """View of the channel-major volume hit by kernel offset (kx, ky, kz)."""
    ex = kx + stride * (out - 1) + 1
    ey = ky + stride * (out - 1) + 1
    ez = kz + stride * (out - 1) + 1
    return xc[:, :, kx:ex:stride, ky:ey:stride, kz:ez:stride]


def _conv3d_forward_numpy(x, w, b, stride, pad):
    bsz, cin, n = x.shape[0], x.shape[1], x.shape[2]
    cout, k = w.shape[0], w.shape[2]
    out = conv_output_size(n, k, stride, pad)
    xc = _pad_channel_major(x, pad)
    L = bsz * out * out * out
    # Buffers are reused across the k^3 offsets; allocation is the
    # dominant cost otherwise.
    flat = np.empty((cin, bsz, out, out, out), dtype=np.float64)
    tmp = np.empty((cout, L), dtype=np.float64)
    acc = np.zeros((cout, L), dtype=np.float64)
    flat2 = flat.reshape(cin, L)
    for kx in range(k):
        for ky in range(k):
            for kz in range(k):
                flat[...] = _offset_slab(xc, kx, ky, kz, stride, out)
                np.dot(w[:, :, kx, ky, kz], flat2, out=tmp)
                acc += tmp
    acc += b[:, None]
    y = acc.reshape(cout, bsz, out, out, out).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(y)


def _conv3d_backward_w_numpy(x, dy, k, stride, pad):
    bsz, cin, n = x.shape[0], x.shape[1], x.shape[2]
    cout, out = dy.shape[1], dy.shape[2]
    xc = _pad_channel_major(x, pad)
    L = bsz * out * out * out
    dyf = np.ascontiguousarray(dy.transpose(1, 0, 2, 3, 4)).reshape(cout, L)
    flat = np.empty((cin, bsz, out, out, out), dtype=np.float64)
    flat2 = flat.reshape(cin, L)
    dw = np.empty((cout, cin, k, k, k), dtype=np.float64)
    for kx in range(k):
        for ky in range(k):
            for kz in range(k):
                flat[...] = _offset_slab(xc, kx, ky, kz, stride, out)
                dw[:, :, kx, ky, kz] = dyf @ flat2.T
    return dw


def _conv3d_backward_x_numpy(w, dy, n, stride, pad):
    bsz, cout = dy.shape[0], dy.shape[1]
    cin, k = w.shape[1], w.shape[2]
    out = dy.shape[2]
    m = n + 2 * pad
    L = bsz * out * out * out
    dyf = np.ascontiguousarray(dy.transpose(1, 0, 2, 3, 4)).reshape(cout, L)
    dxc = np.zeros((cin, bsz, m, m, m), dtype=np.float64)
    tmp = np.empty((cin, L), dtype=np.float64)
    shaped = tmp.reshape(cin, bsz, out, out, out)
    for kx in range(k):
        for ky in range(k):
            for kz in range(k):
                np.dot(w[:, :, kx, ky, kz].T, dyf, out=tmp)
                _offset_slab(dxc, kx, ky, kz, stride, out)[...] += shaped
    dx = dxc.transpose(1, 0, 2, 3, 4)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx)


if NUMBA_ENABLED:

    @njit(cache=True, parallel=True)
    def _conv3d_forward_numba(x, w, b, stride, pad, out):  # pragma: no cover
        bsz, cin, n = x.shape[0], x.shape[1], x.shape[2]
        cout, k = w.shape[0], w.shape[2]
        y = np.empty((bsz, cout, out, out, out), dtype=np.float64)
        for bi in prange(bsz):
            for co in range(cout):
                for ox in range(out):
                    for oy in range(out):
                        for oz in range(out):
                            acc = b[co]
                            x0 = ox * stride - pad
                            y0 = oy * stride - pad
                            z0 = oz * stride - pad
                            for ci in range(cin):
                                for kx in range(k):
                                    ix = x0 + kx
                                    if ix < 0 or ix >= n:
                                        continue
                                    for ky in range(k):
                                        iy = y0 + ky
                                        if iy < 0 or iy >= n:
                                            continue
                                        for kz in range(k):
                                            iz = z0 + kz
                                            if iz < 0 or iz >= n:
                                                continue
                                            acc += x[bi, ci, ix, iy, iz] * w[co, ci, kx, ky, kz]
                            y[bi, co, ox, oy, oz] = acc
        return y

    @njit(cache=True, parallel=True)
    def _conv3d_backward_w_numba(x, dy, k, stride, pad):  # pragma: no cover
        bsz, cin, n = x.shape[0], x.shape[1], x.shape[2]
        cout, out = dy.shape[1], dy.shape[2]
        dw = np.zeros((cout, cin, k, k, k), dtype=np.float64)
        for co in prange(cout):
            for bi in range(bsz):
                for ox in range(out):
                    for oy in range(out):
                        for oz in range(out):
                            g = dy[bi, co, ox, oy, oz]
                            x0 = ox * stride - pad
                            y0 = oy * stride - pad
                            z0 = oz * stride - pad
                            for ci in range(cin):
                                for kx in range(k):
                                    ix = x0 + kx
                                    if ix < 0 or ix >= n:
                                        continue
                                    for ky in range(k):
                                        iy = y0 + ky
                                        if iy < 0 or iy >= n:
                                            continue
                                        for kz in range(k):
                                            iz = z0 + kz
                                            if iz < 0 or iz >= n:
                                                continue
                                            dw[co, ci, kx, ky, kz] += g * x[bi, ci, ix, iy, iz]
        return dw

    @njit(cache=True, parallel=True)
    def _conv3d_backward_x_numba(w, dy, n, stride, pad):  # pragma: no cover
        bsz, cout, out = dy.shape[0], dy.shape[1], dy.shape[2]
        cin, k = w.shape[1], w.shape[2]
        dx = np.zeros((bsz, cin, n, n, n), dtype=np.float64)
        for bi in prange(bsz):
            for ci in range(cin):
                for ix in range(n):
                    for iy in range(n):
                        for iz in range(n):
                            acc = 0.0
                            for kx in range(k):
                                sx = ix + pad - kx
                                if sx < 0 or sx % stride != 0:
                                    continue
                                ox = sx // stride
                                if ox >= out:
                                    continue
                                for ky in range(k):
                                    sy = iy + pad - ky
                                    if sy < 0 or sy % stride != 0:
                                        continue
                                    oy = sy // stride
                                    if oy >= out:
                                        continue
                                    for kz in range(k):
                                        sz = iz + pad - kz
                                        if sz < 0 or sz % stride != 0:
                                            continue
                                        oz = sz // stride
                                        if oz >= out:
                                            continue
                                        for co in range(cout):
                                            acc += dy[bi, co, ox, oy, oz] * w[co, ci, kx, ky, kz]
                            dx[bi, ci, ix, iy, iz] = acc
        return dx

    def _conv3d_forward_jit(x, w, b, stride, pad):
        out = conv_output_size(x.shape[2], w.shape[2], stride, pad)
        return _conv3d_forward_numba(
            np.ascontiguousarray(x), np.ascontiguousarray(w),
            np.ascontiguousarray(b), stride, pad, out,
        )

    def _conv3d_backward_w_jit(x, dy, k, stride, pad):
        return _conv3d_backward_w_numba(
            np.ascontiguousarray(x), np.ascontiguousarray(dy), k, stride, pad
        )

    def _conv3d_backward_x_jit(w, dy, n, stride, pad):
        return _conv3d_backward_x_numba(
            np.ascontiguousarray(w), np.ascontiguousarray(dy), n, stride, pad
        )


if NUMBA_ENABLED and _CONV_NUMBA:
    conv3d_forward = _conv3d_forward_jit
    conv3d_backward_w = _conv3d_backward_w_jit
    conv3d_backward_x = _conv3d_backward_x_jit
else:
    conv3d_forward = _conv3d_forward_numpy
    conv3d_backward_w = _conv3d_backward_w_numpy
    conv3d_backward_x = _conv3d_backward_x_numpy


def backend_name() -> str:
    if not NUMBA_ENABLED:
        return "numpy"
    return "numba(sdv)+numba(conv)" if _CONV_NUMBA else "numba(sdv)+numpy(conv)"
