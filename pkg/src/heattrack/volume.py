"""Dense scalar volumes: sampling, Gaussian heatmaps, MSE and ``.cvol`` I/O.

Volumes are plain numpy arrays of shape ``(depth, height, width)`` indexed
``[z, y, x]``, so the C-order memory layout is x-fastest. Points are always
given as ``(x, y, z)`` in continuous voxel coordinates.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "HeatmapParams",
    "VolumeFileError",
    "CvolFormatError",
    "CvolTruncatedError",
    "CvolDimensionError",
    "as_volume",
    "sample_trilinear",
    "sample_points",
    "render_heatmap",
    "mse",
    "save",
    "load",
]

DTYPE = np.float32

_MAGIC = b"CVOL"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
# largest voxel count we agree to allocate from a file header
_MAX_VOXELS = 2**31 // 4


@dataclass(frozen=True)
class HeatmapParams:
    """Gaussian peak shape used to render cell-position heatmaps.

    ``sigma`` is the per-axis standard deviation in voxels, ordered (x, y, z).
    """

    sigma: tuple[float, float, float] = (2.0, 2.0, 1.0)
    combine_mode: str = "max"

    def __post_init__(self):
        sigma = tuple(float(s) for s in self.sigma)
        if len(sigma) != 3 or min(sigma) <= 0:
            raise ValueError(f"sigma must be three positive values, got {self.sigma}")
        if self.combine_mode not in ("max", "sum"):
            raise ValueError(f"combine_mode must be 'max' or 'sum', got {self.combine_mode!r}")
        object.__setattr__(self, "sigma", sigma)


class VolumeFileError(ValueError):
    """Base class for unreadable ``.cvol`` files."""


class CvolFormatError(VolumeFileError):
    pass


class CvolTruncatedError(VolumeFileError):
    pass


class CvolDimensionError(VolumeFileError):
    pass


def as_volume(data) -> np.ndarray:
    """Return `data` as a contiguous 3D float32 array."""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {arr.shape}")
    return arr


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")


def sample_points(vol, points) -> np.ndarray:
    """Trilinearly sample `vol` at an ``(n, 3)`` array of (x, y, z) points.

    Points outside ``[0, w-1] x [0, h-1] x [0, d-1]`` evaluate to 0.
    """
    vol = np.asarray(vol)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    depth, height, width = vol.shape
    out = np.zeros(len(pts), dtype=np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    inside = ((x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)
              & (z >= 0) & (z <= depth - 1))
    if not inside.any():
        return out
    x, y, z = x[inside], y[inside], z[inside]

    def corners(c, n):
        lo = np.minimum(np.floor(c).astype(np.intp), max(n - 2, 0))
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, c - lo

    x0, x1, fx = corners(x, width)
    y0, y1, fy = corners(y, height)
    z0, z1, fz = corners(z, depth)
    v = vol.astype(np.float64, copy=False)
    c00 = v[z0, y0, x0] * (1 - fx) + v[z0, y0, x1] * fx
    c10 = v[z0, y1, x0] * (1 - fx) + v[z0, y1, x1] * fx
    c01 = v[z1, y0, x0] * (1 - fx) + v[z1, y0, x1] * fx
    c11 = v[z1, y1, x0] * (1 - fx) + v[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out[inside] = c0 * (1 - fz) + c1 * fz
    return out


def sample_trilinear(vol, point) -> float:
    """Trilinear value of `vol` at a single (x, y, z) point; 0 outside the grid."""
    return float(sample_points(vol, np.asarray(point, dtype=np.float64)[None, :])[0])


def render_heatmap(points, shape, params: HeatmapParams = HeatmapParams(), amplitudes=None):
    """Render unit-height Gaussian peaks at `points` on a grid of `shape`.

    Parameters
    ----------
    points : array_like, shape (n, 3)
        Peak centers as (x, y, z).
    shape : tuple of int
        Output shape ``(depth, height, width)``.
    params : HeatmapParams
    amplitudes : array_like, optional
        Per-point peak heights (default 1). Used for confidence-weighted
        priors and for synthetic cell contrast.

    Returns
    -------
    ndarray
        float32 volume; values are clamped to [0, 1] in ``sum`` mode.
    """
    depth, height, width = (int(s) for s in shape)
    if min(depth, height, width) <= 0:
        raise ValueError(f"shape must be positive, got {shape}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    amps = np.ones(len(pts)) if amplitudes is None else np.asarray(amplitudes, dtype=np.float64)
    out = np.zeros((depth, height, width), dtype=np.float64)
    sx, sy, sz = params.sigma
    xs, ys, zs = np.arange(width), np.arange(height), np.arange(depth)
    for (cx, cy, cz), amp in zip(pts, amps):
        gx = np.exp(-((xs - cx) ** 2) / (2 * sx * sx))
        gy = np.exp(-((ys - cy) ** 2) / (2 * sy * sy))
        gz = np.exp(-((zs - cz) ** 2) / (2 * sz * sz))
        blob = amp * (gz[:, None, None] * gy[None, :, None] * gx[None, None, :])
        if params.combine_mode == "max":
            np.maximum(out, blob, out=out)
        else:
            out += blob
    if params.combine_mode == "sum":
        np.clip(out, 0.0, 1.0, out=out)
    return out.astype(DTYPE)


def mse(a, b) -> float:
    """Mean squared difference over all voxels, accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    _check_same_shape(a, b)
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def save(path, vol) -> None:
    """Write `vol` as a little-endian ``.cvol`` file."""
    vol = as_volume(vol)
    depth, height, width = vol.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, width, height, depth))
        fh.write(vol.astype("<f4", copy=False).tobytes(order="C"))


def load(path) -> np.ndarray:
    """Read a ``.cvol`` file written by :func:`save`."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != _MAGIC[: len(raw)]:
            raise CvolFormatError(f"{path}: bad magic {raw[:4]!r}")
        raise CvolTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, width, height, depth = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise CvolFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise CvolFormatError(f"{path}: unsupported version {version}")
    n = width * height * depth
    if n == 0 or n > _MAX_VOXELS:
        raise CvolDimensionError(f"{path}: unusable dimensions {width}x{height}x{depth}")
    payload = len(raw) - _HEADER.size
    if payload < 4 * n:
        raise CvolTruncatedError(
            f"{path}: header declares {n} voxels but payload holds {payload // 4}")
    if payload > 4 * n:
        raise CvolFormatError(f"{path}: {payload - 4 * n} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size)
    return data.astype(DTYPE).reshape(depth, height, width)
