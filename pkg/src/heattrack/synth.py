"""Synthetic worm-like volumetric sequences with exact ground truth.

Cells sit at fixed arc-length positions along a centerline running in y,
with fixed lateral (x, z) offsets. Each frame the centerline bends as a
travelling sine wave in x while the whole body sways along y and x; an
optional constant drift comes on top. Frames are a background level plus
anisotropic Gaussian blobs scaled by per-cell contrast plus Gaussian noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import volume
from .track import Trajectory, write_trajectories

__all__ = ["SynthConfig", "SynthError", "generate", "positions", "write_sequence"]


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    # (width, height, depth) in voxels
    dims: tuple[int, int, int] = (64, 288, 16)
    n_cells: int = 20
    n_frames: int = 30
    body_length: float = 190.0
    body_width: float = 9.0
    body_depth: float = 3.0
    bend_amplitude: float = 6.0
    bend_wavelength: float = 160.0
    # bend phase advance per frame, in cycles
    bend_frequency: float = 0.05
    # oscillating sway of the whole body (x, y) in voxels and its period in frames
    sway_amplitude: tuple[float, float] = (4.0, 38.0)
    sway_period: float = 18.0
    drift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cell_sigma: tuple[float, float, float] = (2.0, 2.0, 1.0)
    contrast: tuple[float, float] = (0.075, 1.0)
    low_contrast_fraction: float = 0.25
    background: float = 0.1
    noise_sigma: float = 0.05
    min_separation: float = 6.0
    # cells group into this many ganglia along the body (0 = uniform spread)
    n_clusters: int = 4
    cluster_spread: float = 8.0
    seed: int = 7

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise SynthError("dims must be three positive integers")
        if self.n_cells < 1:
            raise SynthError("n_cells must be >= 1")
        if self.n_frames < 1:
            raise SynthError("n_frames must be >= 1")
        c_min, c_max = self.contrast
        if not 0 < c_min <= c_max:
            raise SynthError("contrast range needs 0 < c_min <= c_max")
        if not 0 <= self.low_contrast_fraction <= 1:
            raise SynthError("low_contrast_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise SynthError("noise_sigma must be >= 0")
        if min(self.cell_sigma) <= 0:
            raise SynthError("cell_sigma must be positive")

    @property
    def shape(self):
        w, h, d = self.dims
        return (d, h, w)

    def to_dict(self):
        return asdict(self)


def _rng(seed, stream):
    # counter-based generator, one independent stream per (seed, stream)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def _layout(cfg):
    """Arc-length position, lateral offset and contrast of every cell."""
    rng = _rng(cfg.seed, 0)
    if cfg.n_clusters > 0:
        gap = cfg.body_length / cfg.n_clusters
        centers = gap * (np.arange(cfg.n_clusters) + 0.5) + rng.uniform(-0.15, 0.15, cfg.n_clusters) * gap
    s = np.zeros(cfg.n_cells)
    off = np.zeros((cfg.n_cells, 2))
    placed = 0
    misses = 0
    # give up after this many rejections in a row
    while placed < cfg.n_cells and misses < 5000:
        if cfg.n_clusters > 0:
            cand_s = rng.choice(centers) + rng.normal(0.0, cfg.cluster_spread)
            if not 0 <= cand_s <= cfg.body_length:
                misses += 1
                continue
        else:
            cand_s = rng.uniform(0, cfg.body_length)
        cand_off = rng.uniform(-1, 1, 2) * (cfg.body_width, cfg.body_depth)
        p = np.array([cand_off[0], cand_s, cand_off[1]])
        q = np.column_stack([off[:placed, 0], s[:placed], off[:placed, 1]])
        if placed and np.min(np.linalg.norm(q - p, axis=1)) < cfg.min_separation:
            misses += 1
            continue
        misses = 0
        s[placed] = cand_s
        off[placed] = cand_off
        placed += 1
    if placed < cfg.n_cells:
        raise SynthError("cannot place cells at the requested separation; enlarge the body")
    c_min, c_max = cfg.contrast
    n_low = int(round(cfg.low_contrast_fraction * cfg.n_cells))
    contrast = rng.uniform(0.5 * (c_min + c_max), c_max, cfg.n_cells)
    low = rng.permutation(cfg.n_cells)[:n_low]
    contrast[low] = c_min
    return s, off, contrast


def positions(cfg: SynthConfig) -> np.ndarray:
    """Ground-truth cell centers, shape ``(n_frames, n_cells, 3)`` as (x, y, z)."""
    s, off, _ = _layout(cfg)
    w, h, d = cfg.dims
    t = np.arange(cfg.n_frames, dtype=np.float64)[:, None]
    sway = np.sin(2 * np.pi * t / cfg.sway_period) if cfg.sway_period > 0 else np.zeros_like(t)
    drift = np.asarray(cfg.drift, dtype=np.float64)
    y0 = 0.5 * (h - 1 - cfg.body_length)
    bend = cfg.bend_amplitude * np.sin(2 * np.pi * (s[None, :] / cfg.bend_wavelength - cfg.bend_frequency * t))
    x = 0.5 * (w - 1) + off[None, :, 0] + bend + cfg.sway_amplitude[0] * sway + drift[0] * t
    y = y0 + s[None, :] + cfg.sway_amplitude[1] * sway + drift[1] * t
    z = 0.5 * (d - 1) + off[None, :, 1] + drift[2] * t
    pos = np.stack([x, y, z], axis=-1)
    hi = np.array([w - 1, h - 1, d - 1])
    if np.any(pos < 0) or np.any(pos > hi):
        raise SynthError("cells leave the volume; reduce bend/sway amplitude or drift")
    return pos


def generate(cfg: SynthConfig = SynthConfig()):
    """Render the sequence; returns ``(frames, ground_truth_trajectories)``."""
    pos = positions(cfg)
    _, _, contrast = _layout(cfg)
    params = volume.HeatmapParams(cfg.cell_sigma, "sum")
    frames = []
    for t in range(cfg.n_frames):
        img = volume.render_heatmap(pos[t], cfg.shape, params, amplitudes=contrast).astype(np.float64)
        img += cfg.background
        if cfg.noise_sigma > 0:
            img += _rng(cfg.seed, t + 1).normal(0.0, cfg.noise_sigma, cfg.shape)
        frames.append(np.clip(img, 0.0, None).astype(volume.DTYPE))
    gt = []
    for i in range(cfg.n_cells):
        tr = Trajectory(i)
        for t in range(cfg.n_frames):
            tr.append(t, pos[t, i])
        gt.append(tr)
    return frames, gt


def write_sequence(out_dir, frames, gt):
    """Write ``frame_%04d.cvol`` files and ``gt.csv`` into `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(frames):
        volume.save(out / f"frame_{t:04d}.cvol", img)
    write_trajectories(out / "gt.csv", gt)
