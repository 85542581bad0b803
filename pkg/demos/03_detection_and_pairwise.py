"""Detecting cells, and rescuing a faint one with the previous frame.

The heatmap estimator is a normalized matched filter, so a dim cell scores as
high as a bright one once noise is absent. With noise, dim cells fall near
the 0.05 threshold; blending in a prior rendered at last frame's detections
keeps them alive.
"""
import numpy as np

from heattrack import align, detect, volume
from heattrack.detect import DetectConfig, DetectionSet

shape = (12, 64, 48)
cfg = DetectConfig()
rng = np.random.default_rng(0)

cells = np.array([(12.0, 16.0, 5.0), (30.0, 40.0, 6.0)])
img = volume.render_heatmap(cells, shape, volume.HeatmapParams(combine_mode="sum"), amplitudes=[1.0, 0.1])
img = img + 0.1 + rng.normal(0, 0.01, shape).astype(np.float32)
hm = detect.estimate_heatmap(img, cfg)
dets = detect.detect_peaks(hm, cfg)
for p, c in zip(dets.points, dets.confidence):
    print(f"detected ({p[0]:.2f}, {p[1]:.2f}, {p[2]:.2f}) with confidence {c:.3f}")

# A cell whose image response drops to 0.04, below the threshold.
cell = np.array([(24.0, 30.0, 5.0)])
faint = 0.04 * volume.render_heatmap(cell, shape)
print("alone:", len(detect.detect_peaks(faint, cfg)), "detections")

# Last frame saw it confidently; re-render its (here unmoved) position as a prior.
prev = DetectionSet(0, cell, [0.9])
prior = detect.regenerate_prior(prev, align.zero_field(shape), shape, cfg.heatmap_params)
fused = detect.fuse_pairwise(faint, prior, cfg.prior_weight)
print(f"fused peak {fused.max():.3f} = 0.7 * 0.04 + 0.3 * 1.0 -> "
      f"{len(detect.detect_peaks(fused, cfg))} detection")

# Any image response of at least (threshold - w * prior) / (1 - w) is kept.
# For a unit prior the bound is negative: the prior alone clears the threshold,
# which is why a prior nothing supports must fade or be dropped by the tracker.
print("rescue bound for a unit prior:", round((cfg.peak_threshold - cfg.prior_weight) / (1 - cfg.prior_weight), 3))
