"""Cell-position heatmaps with pairwise prior fusion, and peak extraction."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from . import align
from .volume import DTYPE, HeatmapParams, render_heatmap

__all__ = [
    "DetectConfig",
    "DetectionSet",
    "HeatmapEstimator",
    "estimate_heatmap",
    "regenerate_prior",
    "fuse_pairwise",
    "detect_peaks",
    "save_detections",
    "load_detections",
]

# image volume -> heatmap volume; swap in a learned model here
HeatmapEstimator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DetectConfig:
    peak_threshold: float = 0.05
    nms_radius: float = 3.0
    prior_weight: float = 0.3
    sigma: tuple[float, float, float] = (2.0, 2.0, 1.0)
    subvoxel: bool = True
    # matched-filter support, in multiples of sigma per axis
    window: float = 2.5
    # scale regenerated prior peaks by the confidence of their detection
    prior_from_confidence: bool = False

    def __post_init__(self):
        if not 0 < self.peak_threshold < 1:
            raise ValueError("peak_threshold must lie in (0, 1)")
        if self.nms_radius < 1:
            raise ValueError("nms_radius must be >= 1")
        if not 0 <= self.prior_weight <= 1:
            raise ValueError("prior_weight must lie in [0, 1]")
        if self.window <= 0:
            raise ValueError("window must be > 0")
        HeatmapParams(self.sigma)

    @property
    def heatmap_params(self) -> HeatmapParams:
        return HeatmapParams(self.sigma)


@dataclass
class DetectionSet:
    """Detected cell centers of one frame as (x, y, z) rows."""

    frame: int = 0
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.confidence):
            raise ValueError("points and confidence lengths differ")

    def __len__(self):
        return len(self.points)


def _gaussian_kernel_1d(sigma, window):
    radius = max(1, int(np.ceil(window * sigma)))
    u = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-u * u / (2 * sigma * sigma))


def estimate_heatmap(image, cfg: DetectConfig = DetectConfig()) -> np.ndarray:
    """Normalized matched-filter response of `image` to a cell-sized Gaussian.

    At every voxel the background-subtracted image is correlated with a
    unit-peak Gaussian of ``cfg.sigma`` truncated to ``cfg.window`` sigmas,
    and divided by the kernel norm times the image energy in the same window.
    By Cauchy-Schwarz the ratio lies in [-1, 1]; negative values are dropped
    and the rest squared, which turns the correlation profile of a matched
    blob back into a peak of Gaussian-heatmap width. An isolated blob of
    any contrast scores 1 at its center.
    """
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite voxels")
    img = img - np.median(img)
    kernels = [_gaussian_kernel_1d(s, cfg.window) for s in cfg.sigma]
    # arrays are [z, y, x]; sigma is (x, y, z)
    num = img
    energy = img * img
    for axis, k in zip((2, 1, 0), kernels):
        num = ndimage.correlate1d(num, k, axis=axis, mode="constant")
        energy = ndimage.correlate1d(energy, np.ones_like(k), axis=axis, mode="constant")
    knorm = np.prod([np.sum(k * k) for k in kernels])
    denom = np.sqrt(knorm * np.maximum(energy, 0.0))
    out = np.zeros_like(img)
    floor = 1e-9 * denom.max() if denom.size else 0.0
    ok = denom > max(floor, 1e-300)
    out[ok] = np.clip(num[ok] / denom[ok], 0.0, 1.0) ** 2
    return out.astype(DTYPE)


def regenerate_prior(prev: DetectionSet, field, shape, params: HeatmapParams = HeatmapParams(),
                     from_confidence=False) -> np.ndarray:
    """Render a fresh heatmap at the previous detections moved through `field`.

    Points that land outside the volume are dropped. With `from_confidence`
    each peak is scaled by its detection confidence, so a prior that no image
    evidence supports fades within a couple of frames.
    """
    shape = tuple(shape)
    field = np.asarray(field)
    if field.shape != (3,) + shape:
        raise ValueError(f"field shape {field.shape} does not match {shape}")
    if len(prev) == 0:
        return np.zeros(shape, dtype=DTYPE)
    moved = align.warp_points(prev.points, field)
    hi = np.array([shape[2] - 1, shape[1] - 1, shape[0] - 1])
    keep = np.all((moved >= 0) & (moved <= hi), axis=1)
    amps = prev.confidence[keep] if from_confidence else None
    return render_heatmap(moved[keep], shape, params, amplitudes=amps)


def fuse_pairwise(image_hm, prior_hm, w) -> np.ndarray:
    """Convex blend ``(1 - w) * image_hm + w * prior_hm`` clamped to [0, 1]."""
    image_hm = np.asarray(image_hm)
    prior_hm = np.asarray(prior_hm)
    if image_hm.shape != prior_hm.shape:
        raise ValueError(f"heatmap shapes differ: {image_hm.shape} vs {prior_hm.shape}")
    if not 0 <= w <= 1:
        raise ValueError("w must lie in [0, 1]")
    if w == 0:
        return image_hm.astype(DTYPE)
    if w == 1:
        return prior_hm.astype(DTYPE)
    out = (1.0 - w) * image_hm.astype(np.float64) + w * prior_hm.astype(np.float64)
    return np.clip(out, 0.0, 1.0).astype(DTYPE)


def _local_maxima(hm):
    """Voxels beating all 26 neighbors under the order (value, -flat index)."""
    depth, height, width = hm.shape
    padded = np.pad(hm.astype(np.float64), 1, constant_values=-np.inf)
    core = padded[1:-1, 1:-1, 1:-1]
    is_max = np.ones(hm.shape, dtype=bool)
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dz == dy == dx == 0:
                    continue
                nb = padded[1 + dz:1 + dz + depth, 1 + dy:1 + dy + height, 1 + dx:1 + dx + width]
                # a tie goes to the voxel that comes first in (z, y, x) order
                later = (dz, dy, dx) > (0, 0, 0)
                is_max &= (core > nb) | ((core == nb) & later)
    return np.argwhere(is_max)


def _refine(hm, zyx):
    """Sub-voxel offset per axis from a 3-point parabola, as (x, y, z)."""
    offs = np.zeros(3)
    for k, axis in enumerate((2, 1, 0)):
        i = zyx[axis]
        if i == 0 or i == hm.shape[axis] - 1:
            continue
        lo = list(zyx)
        hi = list(zyx)
        lo[axis] -= 1
        hi[axis] += 1
        a, b, c = float(hm[tuple(lo)]), float(hm[tuple(zyx)]), float(hm[tuple(hi)])
        curv = a - 2 * b + c
        if curv < 0:
            offs[k] = np.clip(0.5 * (a - c) / curv, -0.5, 0.5)
    return offs


def detect_peaks(hm, cfg: DetectConfig = DetectConfig(), frame=0) -> DetectionSet:
    """Threshold local maxima of `hm` and apply greedy non-maximum suppression.

    Candidates are visited in decreasing value (ties by z, y, x) and kept
    unless a kept point lies closer than ``cfg.nms_radius``.
    """
    hm = np.asarray(hm)
    cand = _local_maxima(hm)
    vals = hm[tuple(cand.T)].astype(np.float64)
    sel = vals > cfg.peak_threshold
    cand, vals = cand[sel], vals[sel]
    # lexsort: last key is primary
    order = np.lexsort((cand[:, 2], cand[:, 1], cand[:, 0], -vals))
    kept_pts, kept_conf = [], []
    for idx in order:
        zyx = cand[idx]
        p = zyx[::-1].astype(np.float64)
        if cfg.subvoxel:
            p = p + _refine(hm, zyx)
        if kept_pts and np.min(np.linalg.norm(np.asarray(kept_pts) - p, axis=1)) < cfg.nms_radius:
            continue
        kept_pts.append(p)
        kept_conf.append(vals[idx])
    return DetectionSet(frame, np.asarray(kept_pts).reshape(-1, 3), np.asarray(kept_conf))


def save_detections(path, detections):
    """Write one or more DetectionSets as ``frame,x,y,z,confidence`` CSV."""
    if isinstance(detections, DetectionSet):
        detections = [detections]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "x", "y", "z", "confidence"])
        for det in detections:
            for (x, y, z), c in zip(det.points, det.confidence):
                writer.writerow([det.frame, repr(float(x)), repr(float(y)), repr(float(z)), repr(float(c))])


def load_detections(path) -> list[DetectionSet]:
    rows: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.setdefault(int(row["frame"]), []).append(
                [float(row["x"]), float(row["y"]), float(row["z"]), float(row["confidence"])])
    out = []
    for frame in sorted(rows):
        arr = np.asarray(rows[frame])
        out.append(DetectionSet(frame, arr[:, :3], arr[:, 3]))
    return out
