"""Tracking Accuracy and Target Effectiveness, plus per-frame detection scores."""
from __future__ import annotations

import csv
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import assoc

__all__ = [
    "EvalConfig",
    "EvalReport",
    "match_frame",
    "frame_assignments",
    "tracking_accuracy",
    "target_effectiveness",
    "evaluate",
]


@dataclass(frozen=True)
class EvalConfig:
    match_radius: float = 3.0
    # score TE by the longest unbroken run on one track instead of total coverage
    contiguous_te: bool = False

    def __post_init__(self):
        if self.match_radius <= 0:
            raise ValueError("match_radius must be > 0")


def match_frame(detections, gt_points, radius):
    """One-to-one correspondences ``(det_index, gt_index)`` within `radius`."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    problem = assoc.build_hypotheses(detections, gt_points, radius)
    return assoc.solve(problem).matches


def _by_frame(tracks):
    frames = defaultdict(lambda: ([], []))
    for tr in tracks:
        for f, p in zip(tr.frames, tr.points):
            ids, pts = frames[f]
            ids.append(tr.cell_id)
            pts.append(p)
    return frames


def frame_assignments(pred, gt, radius):
    """Map ``frame -> {gt_id: pred_id}`` from per-frame optimal matching."""
    pf = _by_frame(pred)
    out = {}
    for f, (gids, gpts) in _by_frame(gt).items():
        pids, ppts = pf.get(f, ([], []))
        pairs = match_frame(np.reshape(ppts, (-1, 3)), np.reshape(gpts, (-1, 3)), radius)
        out[f] = {gids[g]: pids[d] for d, g in pairs}
    return out


def tracking_accuracy(pred, gt, cfg: EvalConfig = EvalConfig()) -> float:
    """Fraction of ground-truth frame-to-frame links reproduced by one predicted track."""
    assign = frame_assignments(pred, gt, cfg.match_radius)
    links = tp = 0
    for tr in gt:
        for f0, f1 in zip(tr.frames[:-1], tr.frames[1:]):
            if f1 != f0 + 1:
                continue
            links += 1
            a = assign.get(f0, {}).get(tr.cell_id)
            if a is not None and assign.get(f1, {}).get(tr.cell_id) == a:
                tp += 1
    return tp / links if links else 0.0


def _longest_run(frames, ids):
    best = run = 0
    prev_f = prev_id = None
    for f, i in zip(frames, ids):
        if i is not None and i == prev_id and f == prev_f + 1:
            run += 1
        else:
            run = 1 if i is not None else 0
        best = max(best, run)
        prev_f, prev_id = f, i
    return best


def target_effectiveness(pred, gt, cfg: EvalConfig = EvalConfig()) -> float:
    """Mean over targets of the share of frames covered by the dominant predicted track."""
    assign = frame_assignments(pred, gt, cfg.match_radius)
    scores = []
    for tr in gt:
        if not len(tr):
            continue
        ids = [assign.get(f, {}).get(tr.cell_id) for f in tr.frames]
        if cfg.contiguous_te:
            covered = _longest_run(tr.frames, ids)
        else:
            counts = Counter(i for i in ids if i is not None)
            covered = max(counts.values()) if counts else 0
        scores.append(covered / len(tr))
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class EvalReport:
    ta: float
    te: float
    precision: float
    recall: float
    per_frame: list = field(default_factory=list)

    def summary(self) -> str:
        return (f"TA={self.ta:.4f} TE={self.te:.4f} "
                f"precision={self.precision:.4f} recall={self.recall:.4f}")

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["metric", "value"])
            for name in ("ta", "te", "precision", "recall"):
                writer.writerow([name.upper() if len(name) == 2 else name, f"{getattr(self, name):.6f}"])

    def frames_to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["frame", "n_pred", "n_gt", "matched", "precision", "recall"])
            for row in self.per_frame:
                writer.writerow([row["frame"], row["n_pred"], row["n_gt"], row["matched"],
                                 f"{row['precision']:.6f}", f"{row['recall']:.6f}"])


def evaluate(pred, gt, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    pf, gf = _by_frame(pred), _by_frame(gt)
    rows = []
    tot_pred = tot_gt = tot_match = 0
    for f in sorted(set(pf) | set(gf)):
        ppts = np.reshape(pf[f][1] if f in pf else [], (-1, 3))
        gpts = np.reshape(gf[f][1] if f in gf else [], (-1, 3))
        m = len(match_frame(ppts, gpts, cfg.match_radius))
        rows.append({
            "frame": f, "n_pred": len(ppts), "n_gt": len(gpts), "matched": m,
            "precision": m / len(ppts) if len(ppts) else 0.0,
            "recall": m / len(gpts) if len(gpts) else 0.0,
        })
        tot_pred += len(ppts)
        tot_gt += len(gpts)
        tot_match += m
    return EvalReport(
        tracking_accuracy(pred, gt, cfg),
        target_effectiveness(pred, gt, cfg),
        tot_match / tot_pred if tot_pred else 0.0,
        tot_match / tot_gt if tot_gt else 0.0,
        rows,
    )
