"""Volumes and cell-position heatmaps, plus the .cvol file format.

A volume is a float32 array indexed [z, y, x]; points are (x, y, z) in
voxel units. Cell positions become heatmaps with one Gaussian peak per cell.
"""
import tempfile
from pathlib import Path

import numpy as np

from heattrack import volume

# Three cells in a 16 x 64 x 48 (depth, height, width) volume.
cells = np.array([(10.0, 12.0, 4.0), (30.5, 40.25, 8.0), (20.0, 50.0, 11.0)])
hm = volume.render_heatmap(cells, (16, 64, 48))
print("heatmap shape", hm.shape, "dtype", hm.dtype, "max", hm.max())

# Peaks have unit height at integer centers; the default spread is sigma = (2, 2, 1).
print("value at first cell:", volume.sample_trilinear(hm, cells[0]))
print("one sigma along x:  ", volume.sample_trilinear(hm, cells[0] + (2, 0, 0)))

# Sub-voxel centers are sampled trilinearly; outside the grid the value is 0.
print("off-grid center:    ", round(volume.sample_trilinear(hm, cells[1]), 4))
print("outside the volume: ", volume.sample_trilinear(hm, (-1.0, 5.0, 5.0)))

# "sum" mode adds overlapping peaks with per-cell amplitudes, which is how
# synthetic images with varying contrast are drawn.
img = volume.render_heatmap(cells, hm.shape, volume.HeatmapParams(combine_mode="sum"),
                            amplitudes=[1.0, 0.3, 0.075])
print("sampled at the three centers:", [round(volume.sample_trilinear(img, c), 3) for c in cells])

# .cvol files hold a 20-byte header and raw little-endian float32 voxels.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "cells.cvol"
    volume.save(path, hm)
    back = volume.load(path)
    print(f"{path.name}: {path.stat().st_size} bytes, identical after reload: {back.tobytes() == hm.tobytes()}")
    path.write_bytes(path.read_bytes()[:-8])
    try:
        volume.load(path)
    except volume.CvolTruncatedError as exc:
        print("truncated file rejected:", exc.args[0].split(": ", 1)[1])
