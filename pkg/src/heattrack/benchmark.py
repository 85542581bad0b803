"""Ablation benchmark on synthetic sequences, one row per pipeline variant."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import metrics, synth
from .track import ABLATIONS, PipelineConfig, run_sequence

__all__ = ["AblationRow", "link_displacements", "run_ablation", "format_table"]

logger = logging.getLogger(__name__)


@dataclass
class AblationRow:
    name: str
    ta: list
    te: list

    @property
    def mean_ta(self):
        return float(np.mean(self.ta))

    @property
    def mean_te(self):
        return float(np.mean(self.te))


def link_displacements(gt) -> np.ndarray:
    """Length of every ground-truth frame-to-frame step."""
    steps = [np.linalg.norm(np.diff(tr.points, axis=0), axis=1) for tr in gt if len(tr) > 1]
    return np.concatenate(steps) if steps else np.zeros(0)


def run_ablation(seeds=(0, 1, 2, 3, 4), synth_cfg: synth.SynthConfig = synth.SynthConfig(),
                 base: PipelineConfig = PipelineConfig(),
                 eval_cfg: metrics.EvalConfig = metrics.EvalConfig(), rows=None):
    """Run every ablation row on every seed; returns ``{name: AblationRow}``."""
    names = list(ABLATIONS) if rows is None else list(rows)
    table = {name: AblationRow(name, [], []) for name in names}
    for seed in seeds:
        frames, gt = synth.generate(replace(synth_cfg, seed=seed))
        for name in names:
            reg, ft, pd = ABLATIONS[name]
            cfg = replace(base, use_registration=reg, use_fine_tune=ft, use_pairwise=pd)
            pred = run_sequence(frames, cfg)
            table[name].ta.append(metrics.tracking_accuracy(pred, gt, eval_cfg))
            table[name].te.append(metrics.target_effectiveness(pred, gt, eval_cfg))
            logger.info("seed %d %-14s TA=%.4f TE=%.4f", seed, name, table[name].ta[-1], table[name].te[-1])
    return table


def format_table(table) -> str:
    lines = [f"{'method':<16}{'TA':>8}{'TE':>8}"]
    for row in table.values():
        lines.append(f"{row.name:<16}{row.mean_ta:>8.4f}{row.mean_te:>8.4f}")
    return "\n".join(lines)
