"""Non-rigid alignment of heatmap pairs by direct displacement-field descent.

A displacement field is an array of shape ``(3, depth, height, width)`` whose
leading axis holds the (dx, dy, dz) components in voxels. Images are warped
by backward sampling, ``out(p) = src(p - phi(p))``, while points move forward,
``c -> c + phi(c)``; both agree exactly for constant fields.

The alignment objective is

    total = mean_p (fixed(p) - warped(p))**2 + gamma * R_p |grad phi(p)|**2

where R is a mean over voxels by default (``smooth_reduction="sum"`` gives
the plain sum) and the Jacobian uses forward differences that vanish on the
far face of every axis.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field as dc_field

import numba
import numpy as np
from scipy import ndimage

from . import volume as vol_mod

__all__ = [
    "AlignConfig",
    "AlignLog",
    "AlignmentError",
    "zero_field",
    "warp_image",
    "warp_point",
    "warp_points",
    "loss",
    "loss_gradient",
    "smoothness",
    "fine_tune",
    "save_field",
    "load_field",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignConfig:
    gamma: float = 0.01
    learning_rate: float = 1e-2
    max_iters: int = 1500
    update_tol: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # number of coarser stages run before full resolution (0 = off)
    pyramid_levels: int = 3
    smooth_reduction: str = "mean"
    # heatmap level (relative to the max) marking voxels whose update counts
    support_level: float = 0.01

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.update_tol <= 0:
            raise ValueError("update_tol must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid optimizer moments")
        if self.pyramid_levels < 0:
            raise ValueError("pyramid_levels must be >= 0")
        if self.smooth_reduction not in ("mean", "sum"):
            raise ValueError("smooth_reduction must be 'mean' or 'sum'")


class AlignmentError(RuntimeError):
    """Raised when the alignment loss stops being finite."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass
class AlignLog:
    """Per-iteration record of a :func:`fine_tune` run."""

    iteration: list = dc_field(default_factory=list)
    total: list = dc_field(default_factory=list)
    sim: list = dc_field(default_factory=list)
    smooth: list = dc_field(default_factory=list)
    mean_update: list = dc_field(default_factory=list)
    accepted: list = dc_field(default_factory=list)
    level: list = dc_field(default_factory=list)

    def append(self, it, total, sim, smooth, mean_update, accepted, level=0):
        self.iteration.append(it)
        self.total.append(total)
        self.sim.append(sim)
        self.smooth.append(smooth)
        self.mean_update.append(mean_update)
        self.accepted.append(accepted)
        self.level.append(level)

    def __len__(self):
        return len(self.iteration)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iter", "total", "sim", "smooth", "mean_update"])
            for row in zip(self.iteration, self.total, self.sim, self.smooth, self.mean_update):
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def zero_field(shape) -> np.ndarray:
    return np.zeros((3,) + tuple(shape), dtype=np.float64)


def _check_field(field, shape):
    field = np.asarray(field)
    if field.shape != (3,) + tuple(shape):
        raise ValueError(f"field shape {field.shape} does not match volume shape {tuple(shape)}")
    return field


@numba.njit(cache=True, inline="always")
def _corner(q, n):
    lo = int(math.floor(q))
    if lo > n - 2:
        lo = max(n - 2, 0)
    hi = min(lo + 1, n - 1)
    return lo, hi, q - lo


@numba.njit(cache=True)
def _warp_kernel(src, phi, out):
    depth, height, width = src.shape
    for z in range(depth):
        for y in range(height):
            for x in range(width):
                qx = x - phi[0, z, y, x]
                qy = y - phi[1, z, y, x]
                qz = z - phi[2, z, y, x]
                if (qx < 0.0 or qx > width - 1 or qy < 0.0 or qy > height - 1
                        or qz < 0.0 or qz > depth - 1):
                    out[z, y, x] = 0.0
                    continue
                x0, x1, fx = _corner(qx, width)
                y0, y1, fy = _corner(qy, height)
                z0, z1, fz = _corner(qz, depth)
                c00 = src[z0, y0, x0] * (1 - fx) + src[z0, y0, x1] * fx
                c10 = src[z0, y1, x0] * (1 - fx) + src[z0, y1, x1] * fx
                c01 = src[z1, y0, x0] * (1 - fx) + src[z1, y0, x1] * fx
                c11 = src[z1, y1, x0] * (1 - fx) + src[z1, y1, x1] * fx
                out[z, y, x] = (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz


@numba.njit(cache=True)
def _loss_kernel(fixed, moving, phi, weight, grad, want_grad):
    """Return (sum of squared residuals, summed smoothness) and fill `grad`.

    `grad` receives the gradient of ``mean residual + weight * smoothness``.
    """
    depth, height, width = fixed.shape
    n = depth * height * width
    acc = 0.0
    for z in range(depth):
        for y in range(height):
            for x in range(width):
                qx = x - phi[0, z, y, x]
                qy = y - phi[1, z, y, x]
                qz = z - phi[2, z, y, x]
                f = fixed[z, y, x]
                if (qx < 0.0 or qx > width - 1 or qy < 0.0 or qy > height - 1
                        or qz < 0.0 or qz > depth - 1):
                    acc += f * f
                    if want_grad:
                        grad[0, z, y, x] = 0.0
                        grad[1, z, y, x] = 0.0
                        grad[2, z, y, x] = 0.0
                    continue
                x0, x1, fx = _corner(qx, width)
                y0, y1, fy = _corner(qy, height)
                z0, z1, fz = _corner(qz, depth)
                v000 = moving[z0, y0, x0]
                v001 = moving[z0, y0, x1]
                v010 = moving[z0, y1, x0]
                v011 = moving[z0, y1, x1]
                v100 = moving[z1, y0, x0]
                v101 = moving[z1, y0, x1]
                v110 = moving[z1, y1, x0]
                v111 = moving[z1, y1, x1]
                c00 = v000 * (1 - fx) + v001 * fx
                c10 = v010 * (1 - fx) + v011 * fx
                c01 = v100 * (1 - fx) + v101 * fx
                c11 = v110 * (1 - fx) + v111 * fx
                c0 = c00 * (1 - fy) + c10 * fy
                c1 = c01 * (1 - fy) + c11 * fy
                m = c0 * (1 - fz) + c1 * fz
                r = f - m
                acc += r * r
                if want_grad:
                    dx = (((v001 - v000) * (1 - fy) + (v011 - v010) * fy) * (1 - fz)
                          + ((v101 - v100) * (1 - fy) + (v111 - v110) * fy) * fz)
                    dy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
                    dz = c1 - c0
                    # d r^2 / d phi = 2 r dm/dq since q = p - phi
                    s = 2.0 * r / n
                    grad[0, z, y, x] = s * dx
                    grad[1, z, y, x] = s * dy
                    grad[2, z, y, x] = s * dz
    smooth = 0.0
    g2 = 2.0 * weight
    for c in range(3):
        for z in range(depth):
            for y in range(height):
                for x in range(width):
                    p = phi[c, z, y, x]
                    if x + 1 < width:
                        d = phi[c, z, y, x + 1] - p
                        smooth += d * d
                        if want_grad:
                            grad[c, z, y, x] -= g2 * d
                            grad[c, z, y, x + 1] += g2 * d
                    if y + 1 < height:
                        d = phi[c, z, y + 1, x] - p
                        smooth += d * d
                        if want_grad:
                            grad[c, z, y, x] -= g2 * d
                            grad[c, z, y + 1, x] += g2 * d
                    if z + 1 < depth:
                        d = phi[c, z + 1, y, x] - p
                        smooth += d * d
                        if want_grad:
                            grad[c, z, y, x] -= g2 * d
                            grad[c, z + 1, y, x] += g2 * d
    return acc, smooth


def smoothness(field):
    """Sum over voxels of the squared forward-difference Jacobian of `field`."""
    field = np.asarray(field, dtype=np.float64)
    total = 0.0
    for axis in (1, 2, 3):
        d = np.diff(field, axis=axis)
        total += float(np.sum(d * d))
    return total


def _evaluate(fixed, moving, field, gamma, want_grad, reduction="mean"):
    fixed = np.ascontiguousarray(fixed, dtype=np.float64)
    moving = np.ascontiguousarray(moving, dtype=np.float64)
    if fixed.shape != moving.shape:
        raise ValueError(f"volume shapes differ: {fixed.shape} vs {moving.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    field = np.ascontiguousarray(_check_field(field, fixed.shape), dtype=np.float64)
    grad = np.empty_like(field) if want_grad else np.empty((3, 1, 1, 1))
    norm = fixed.size if reduction == "mean" else 1
    sq, smooth = _loss_kernel(fixed, moving, field, float(gamma) / norm, grad, want_grad)
    sim = sq / fixed.size
    smooth /= norm
    total = sim + gamma * smooth
    return total, sim, smooth, (grad if want_grad else None)


def warp_image(src, field) -> np.ndarray:
    """Resample `src` through `field`: ``out(p) = src(p - field(p))``."""
    src = np.asarray(src)
    field = np.ascontiguousarray(_check_field(field, src.shape), dtype=np.float64)
    out = np.empty(src.shape, dtype=np.float64)
    _warp_kernel(src.astype(np.float64), field, out)
    return out.astype(vol_mod.DTYPE)


def warp_points(points, field) -> np.ndarray:
    """Move each (x, y, z) point by the field interpolated at that point."""
    field = np.asarray(field)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    depth, height, width = field.shape[1:]
    hi = np.array([width - 1, height - 1, depth - 1])
    bad = np.any((pts < 0) | (pts > hi), axis=1)
    if bad.any():
        raise ValueError(f"point {pts[bad][0].tolist()} lies outside the field domain")
    disp = np.stack([vol_mod.sample_points(field[c], pts) for c in range(3)], axis=1)
    return pts + disp


def warp_point(point, field) -> np.ndarray:
    return warp_points(np.asarray(point, dtype=np.float64)[None, :], field)[0]


def loss(fixed, moving, field, gamma, reduction="mean"):
    """Return ``(total, sim, smooth)`` for aligning `moving` onto `fixed`."""
    total, sim, smooth, _ = _evaluate(fixed, moving, field, gamma, False, reduction)
    return total, sim, smooth


def loss_gradient(fixed, moving, field, gamma, reduction="mean") -> np.ndarray:
    """Analytic gradient of the total loss with respect to every field entry."""
    return _evaluate(fixed, moving, field, gamma, True, reduction)[3]


@numba.njit(cache=True)
def _adam_step(phi, grad, m, v, lr, beta1, beta2, eps, t, mask):
    """In-place Adam update.

    Returns the mean absolute update of each component over voxels where
    `mask` is set (all voxels if none are).
    """
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    ncomp = phi.shape[0]
    n = phi.shape[1]
    count = 0
    for i in range(n):
        if mask[i]:
            count += 1
    mean_upd = np.zeros(ncomp)
    for c in range(ncomp):
        s_all = 0.0
        s_mask = 0.0
        for i in range(n):
            g = grad[c, i]
            mi = beta1 * m[c, i] + (1.0 - beta1) * g
            vi = beta2 * v[c, i] + (1.0 - beta2) * g * g
            m[c, i] = mi
            v[c, i] = vi
            step = lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)
            phi[c, i] -= step
            s_all += abs(step)
            if mask[i]:
                s_mask += abs(step)
        mean_upd[c] = s_mask / count if count else s_all / n
    return mean_upd


def _support(fixed, moving, level):
    peak = max(float(fixed.max()), float(moving.max()))
    if peak <= 0:
        return np.zeros(fixed.size, dtype=np.bool_)
    return (np.maximum(fixed, moving) >= level * peak).reshape(-1)


def _descend(fixed, moving, init, cfg, log, level):
    reduction = cfg.smooth_reduction
    phi = np.array(init, dtype=np.float64, order="C")
    total, sim, smooth, grad = _evaluate(fixed, moving, phi, cfg.gamma, True, reduction)
    if not math.isfinite(total):
        raise AlignmentError("non-finite initial loss", 0)
    best_total, best_phi = total, phi.copy()
    flat_phi = phi.reshape(3, -1)
    m = np.zeros_like(flat_phi)
    v = np.zeros_like(flat_phi)
    mask = _support(fixed, moving, cfg.support_level)
    for it in range(1, cfg.max_iters + 1):
        upd = _adam_step(flat_phi, grad.reshape(3, -1), m, v, cfg.learning_rate,
                         cfg.beta1, cfg.beta2, cfg.eps, it, mask)
        total, sim, smooth, grad = _evaluate(fixed, moving, phi, cfg.gamma, True, reduction)
        if not math.isfinite(total):
            raise AlignmentError("non-finite loss", it)
        mean_update = float(upd.max())
        accepted = total <= best_total
        if accepted:
            best_total = total
            best_phi[...] = phi
        log.append(it, total, sim, smooth, mean_update, accepted, level)
        if mean_update < cfg.update_tol:
            break
    return best_phi, best_total


# axes shorter than twice this are no longer decimated
_MIN_PYRAMID_SIZE = 8


def _decimated_axes(shape):
    return tuple(n >= 2 * _MIN_PYRAMID_SIZE for n in shape)


def _downsample(img, axes):
    """Blur then halve `img` along the flagged axes (array order z, y, x)."""
    sigma = [1.0 if a else 0.0 for a in axes]
    blurred = ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), sigma, mode="constant")
    return blurred[tuple(slice(None, None, 2) if a else slice(None) for a in axes)]


def _resample_field(field, shape, scale):
    """Resample a field onto a grid of `shape` whose spacing is `scale` times finer.

    `scale` holds one factor per array axis (z, y, x); fine index ``i`` maps to
    coarse coordinate ``i / scale`` and each displacement component is
    multiplied by the factor of its own axis.
    """
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (3,))
    grid = np.indices(shape, dtype=np.float64) / scale[:, None, None, None]
    out = np.empty((3,) + tuple(shape))
    # component c (dx, dy, dz) lives along array axis 2 - c
    for c in range(3):
        out[c] = ndimage.map_coordinates(field[c], grid, order=1, mode="nearest") * scale[2 - c]
    return out


def fine_tune(fixed, moving, cfg: AlignConfig = AlignConfig(), init=None):
    """Optimize a displacement field aligning `moving` onto `fixed`.

    Runs Adam on the per-voxel field until the mean absolute update of every
    component drops below ``cfg.update_tol`` or ``cfg.max_iters`` is hit.
    With ``cfg.pyramid_levels > 0`` the pair is first solved on blurred
    copies halved along every axis of at least 16 voxels; each stage seeds
    the next finer one, and the iteration cap applies per stage.

    Returns
    -------
    field : ndarray, shape (3, d, h, w)
        The lowest-loss field seen, never worse than `init`.
    log : AlignLog
    """
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if fixed.shape != moving.shape:
        raise ValueError(f"volume shapes differ: {fixed.shape} vs {moving.shape}")
    init = zero_field(fixed.shape) if init is None else np.asarray(_check_field(init, fixed.shape), dtype=np.float64)
    log = AlignLog()

    pyramid = [(fixed, moving, np.ones(3))]
    for _ in range(cfg.pyramid_levels):
        f, mv, factor = pyramid[-1]
        axes = _decimated_axes(f.shape)
        if not any(axes):
            break
        pyramid.append((_downsample(f, axes), _downsample(mv, axes), factor * np.where(axes, 2.0, 1.0)))

    start = init
    for level in range(len(pyramid) - 1, 0, -1):
        f, mv, factor = pyramid[level]
        seed = _resample_field(init, f.shape, 1.0 / factor) if level == len(pyramid) - 1 else start
        coarse, _ = _descend(f, mv, seed, cfg, log, level)
        finer_shape, finer_factor = pyramid[level - 1][0].shape, pyramid[level - 1][2]
        start = _resample_field(coarse, finer_shape, factor / finer_factor)

    init_total = loss(fixed, moving, init, cfg.gamma, cfg.smooth_reduction)[0]
    best, best_total = _descend(fixed, moving, start, cfg, log, 0)
    if best_total > init_total:
        best = init.copy()
    logger.debug("fine_tune finished after %d iterations, loss %.6g", len(log), min(best_total, init_total))
    return best, log


def save_field(prefix, field):
    """Write the three components as ``<prefix>.dx.cvol``, ``.dy.cvol``, ``.dz.cvol``."""
    for name, comp in zip(("dx", "dy", "dz"), np.asarray(field)):
        vol_mod.save(f"{prefix}.{name}.cvol", comp)


def load_field(prefix) -> np.ndarray:
    return np.stack([vol_mod.load(f"{prefix}.{name}.cvol") for name in ("dx", "dy", "dz")]).astype(np.float64)
