"""Frame-to-frame tracking loop: detect, align, fuse prior, associate.

Each step turns the tracker state at frame t plus the image at t+1 into the
state at t+1:

1. preliminary heatmap of the new image,
2. displacement field aligning the frame-t heatmap to it,
3. prior heatmap regenerated at the warped frame-t detections,
4. fused heatmap (or the preliminary one alone) -> peak detections,
5. gated assignment between warped frame-t detections and the new ones.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import align, assoc, detect
from .volume import render_heatmap

__all__ = [
    "PipelineConfig",
    "Trajectory",
    "TrackState",
    "StepResult",
    "PipelineError",
    "TrajectoryCSVError",
    "ABLATIONS",
    "initial_state",
    "step",
    "run_sequence",
    "write_trajectories",
    "read_trajectories",
]

logger = logging.getLogger(__name__)

CSV_HEADER = ["CellID", "frame", "x", "y", "z"]


@dataclass(frozen=True)
class PipelineConfig:
    align: align.AlignConfig = align.AlignConfig()
    detect: detect.DetectConfig = detect.DetectConfig()
    gate_radius: float = 10.0
    use_registration: bool = True
    use_fine_tune: bool = True
    use_pairwise: bool = True
    # iteration budget standing in for a field that was never fine-tuned
    no_finetune_iters: int = 50
    confidence_scores: bool = False
    min_track_length: int = 1
    # moving image for alignment: "rendered" unit peaks at the frame-t
    # detections, "weighted" peaks scaled by confidence, or "estimated" heatmap
    align_source: str = "estimated"

    def __post_init__(self):
        if self.gate_radius <= 0:
            raise ValueError("gate_radius must be > 0")
        if self.no_finetune_iters < 1:
            raise ValueError("no_finetune_iters must be >= 1")
        if self.min_track_length < 1:
            raise ValueError("min_track_length must be >= 1")
        if self.align_source not in ("rendered", "weighted", "estimated"):
            raise ValueError(f"unknown align_source {self.align_source!r}")

    @property
    def effective_align(self) -> align.AlignConfig:
        if self.use_fine_tune:
            return self.align
        return replace(self.align, max_iters=min(self.align.max_iters, self.no_finetune_iters))


# ablation rows: name -> (registration, fine-tuning, pairwise detection)
ABLATIONS = {
    "w/o R, FT, PD": (False, False, False),
    "w/o FT, PD": (True, False, False),
    "w/o PD": (True, True, False),
    "full": (True, True, True),
}


class PipelineError(RuntimeError):
    def __init__(self, frame, cause):
        super().__init__(f"frame {frame}: {cause}")
        self.frame = frame
        self.cause = cause


class TrajectoryCSVError(ValueError):
    def __init__(self, row, message):
        super().__init__(f"row {row}: {message}")
        self.row = row


@dataclass
class Trajectory:
    cell_id: int
    frames: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    confidence: list = field(default_factory=list)

    def append(self, frame, position, conf=None):
        if self.frames and frame != self.frames[-1] + 1:
            raise ValueError(f"track {self.cell_id}: frame {frame} does not follow {self.frames[-1]}")
        self.frames.append(int(frame))
        self.positions.append(np.asarray(position, dtype=np.float64))
        self.confidence.append(conf)

    def __len__(self):
        return len(self.frames)

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)


@dataclass
class TrackState:
    frame: int
    detections: detect.DetectionSet
    ids: np.ndarray
    next_id: int
    # heatmap the frame-t detections were extracted from
    heatmap: Optional[np.ndarray] = None


@dataclass
class StepResult:
    frame: int
    heatmap: np.ndarray
    field: np.ndarray
    align_log: Optional[align.AlignLog]
    prior: Optional[np.ndarray]
    detections: detect.DetectionSet
    problem: assoc.AssociationProblem
    association: assoc.AssociationResult


def _estimator(cfg, estimator):
    if estimator is not None:
        return estimator
    return lambda img: detect.estimate_heatmap(img, cfg.detect)


def initial_state(image, cfg: PipelineConfig = PipelineConfig(), estimator=None, frame=0) -> TrackState:
    """Detect on the first frame alone and open one track per detection."""
    hm = _estimator(cfg, estimator)(np.asarray(image))
    dets = detect.detect_peaks(hm, cfg.detect, frame=frame)
    return TrackState(frame, dets, np.arange(len(dets)), len(dets), hm)


def _moving_heatmap(state, shape, cfg):
    params = cfg.detect.heatmap_params
    if cfg.align_source == "estimated" and state.heatmap is not None:
        return state.heatmap
    amps = state.detections.confidence if cfg.align_source == "weighted" else None
    return render_heatmap(state.detections.points, shape, params, amplitudes=amps)


def step(state: TrackState, image, cfg: PipelineConfig = PipelineConfig(), estimator=None):
    """Advance the tracker by one frame; returns ``(new_state, StepResult)``."""
    image = np.asarray(image)
    shape = image.shape
    t1 = state.frame + 1
    prev = state.detections
    params = cfg.detect.heatmap_params
    try:
        hm = _estimator(cfg, estimator)(image)
        log = None
        if cfg.use_registration and len(prev):
            moving = _moving_heatmap(state, shape, cfg)
            phi, log = align.fine_tune(hm, moving, cfg.effective_align)
        else:
            phi = align.zero_field(shape)
        prior = None
        fused = hm
        if cfg.use_pairwise:
            prior = detect.regenerate_prior(prev, phi, shape, params, cfg.detect.prior_from_confidence)
            fused = detect.fuse_pairwise(hm, prior, cfg.detect.prior_weight)
        dets = detect.detect_peaks(fused, cfg.detect, frame=t1)
        warped = align.warp_points(prev.points, phi) if len(prev) else prev.points
        if cfg.confidence_scores:
            problem = assoc.build_hypotheses(warped, dets.points, cfg.gate_radius,
                                             prev.confidence, dets.confidence)
        else:
            problem = assoc.build_hypotheses(warped, dets.points, cfg.gate_radius)
        result = assoc.solve(problem)
    except (ValueError, RuntimeError) as exc:
        raise PipelineError(t1, exc) from exc

    ids = np.full(len(dets), -1, dtype=np.int64)
    for i, j in result.matches:
        ids[j] = state.ids[i]
    next_id = state.next_id
    for j in result.unmatched_target:
        ids[j] = next_id
        next_id += 1
    new_state = TrackState(t1, dets, ids, next_id, fused)
    return new_state, StepResult(t1, hm, phi, log, prior, dets, problem, result)


def run_sequence(volumes, cfg: PipelineConfig = PipelineConfig(), estimator=None,
                 callback: Optional[Callable[[StepResult], None]] = None) -> list:
    """Track cells through a sequence of volumes; returns trajectories by CellID."""
    volumes = list(volumes)
    if len(volumes) < 2:
        raise ValueError("need at least two frames")
    shape = np.asarray(volumes[0]).shape
    for k, v in enumerate(volumes):
        if np.asarray(v).shape != shape:
            raise ValueError(f"frame {k} has shape {np.asarray(v).shape}, expected {shape}")

    tracks: dict[int, Trajectory] = {}

    def record(st):
        for tid, p, c in zip(st.ids, st.detections.points, st.detections.confidence):
            tracks.setdefault(int(tid), Trajectory(int(tid))).append(st.frame, p, float(c))

    try:
        state = initial_state(volumes[0], cfg, estimator)
    except (ValueError, RuntimeError) as exc:
        raise PipelineError(0, exc) from exc
    record(state)
    for img in volumes[1:]:
        state, res = step(state, img, cfg, estimator)
        record(state)
        if callback is not None:
            callback(res)
        logger.debug("frame %d: %d detections, %d matches", state.frame,
                     len(state.detections), len(res.association.matches))
    return [tracks[k] for k in sorted(tracks)]


def write_trajectories(path, tracks, min_length=1):
    """Write ``CellID,frame,x,y,z`` rows, one per sample, sorted by id then frame."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for tr in sorted(tracks, key=lambda t: t.cell_id):
            if len(tr) < min_length:
                continue
            for f, (x, y, z) in zip(tr.frames, tr.points):
                writer.writerow([tr.cell_id, f, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}"])


def read_trajectories(path) -> list:
    """Parse a trajectory CSV; malformed rows raise :class:`TrajectoryCSVError`."""
    samples: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise TrajectoryCSVError(1, f"expected header {','.join(CSV_HEADER)}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise TrajectoryCSVError(rowno, f"expected 5 fields, got {len(row)}")
            try:
                cid, frame = int(row[0]), int(row[1])
                pos = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise TrajectoryCSVError(rowno, str(exc)) from None
            if not np.all(np.isfinite(pos)):
                raise TrajectoryCSVError(rowno, "non-finite coordinate")
            samples.setdefault(cid, []).append((frame, pos, rowno))
    out = []
    for cid in sorted(samples):
        rows = sorted(samples[cid], key=lambda r: r[0])
        tr = Trajectory(cid)
        for frame, pos, rowno in rows:
            if tr.frames and frame == tr.frames[-1]:
                raise TrajectoryCSVError(rowno, f"duplicate frame {frame} for CellID {cid}")
            tr.frames.append(frame)
            tr.positions.append(np.asarray(pos))
            tr.confidence.append(None)
        out.append(tr)
    return out
