import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from heattrack import volume
from heattrack.volume import HeatmapParams


def test_sample_grid_point_and_midpoint():
    vol = np.zeros((4, 4, 4), dtype=np.float32)
    vol[1, 2, 3] = 1.0
    assert volume.sample_trilinear(vol, (3, 2, 1)) == 1.0
    assert volume.sample_trilinear(vol, (2.5, 2, 1)) == pytest.approx(0.5)
    assert volume.sample_trilinear(vol, (2.5, 1.5, 0.5)) == pytest.approx(0.125)


def test_sample_outside_is_zero():
    vol = np.ones((3, 4, 5), dtype=np.float32)
    assert volume.sample_trilinear(vol, (-0.01, 1, 1)) == 0.0
    assert volume.sample_trilinear(vol, (4.01, 1, 1)) == 0.0
    # the closed box includes the far faces
    assert volume.sample_trilinear(vol, (4, 3, 2)) == 1.0


def test_sample_linear_field_is_exact(rng):
    z, y, x = np.indices((5, 6, 7), dtype=np.float64)
    vol = 0.5 * x - 2.0 * y + 3.0 * z + 1.0
    pts = rng.uniform([0, 0, 0], [6, 5, 4], size=(50, 3))
    expect = 0.5 * pts[:, 0] - 2.0 * pts[:, 1] + 3.0 * pts[:, 2] + 1.0
    np.testing.assert_allclose(volume.sample_points(vol, pts), expect, rtol=0, atol=1e-12)


def test_render_peak_values():
    hm = volume.render_heatmap([(10, 12, 4)], (8, 24, 20))
    assert hm.dtype == np.float32
    assert hm[4, 12, 10] == 1.0
    assert np.unravel_index(np.argmax(hm), hm.shape) == (4, 12, 10)
    # one sigma along x: exp(-1/2)
    assert hm[4, 12, 12] == pytest.approx(np.exp(-0.5), rel=1e-6)


def test_render_empty_and_modes():
    assert not volume.render_heatmap(np.zeros((0, 3)), (4, 5, 6)).any()
    pts = [(5, 5, 2), (6, 5, 2)]
    hmax = volume.render_heatmap(pts, (5, 11, 11), HeatmapParams(combine_mode="max"))
    hsum = volume.render_heatmap(pts, (5, 11, 11), HeatmapParams(combine_mode="sum"))
    assert hmax.max() == 1.0
    assert hsum.max() == 1.0  # clamped
    assert np.all(hsum >= hmax)


def test_heatmap_params_validation():
    with pytest.raises(ValueError):
        HeatmapParams(sigma=(1, 0, 1))
    with pytest.raises(ValueError):
        HeatmapParams(combine_mode="mean")


def test_mse():
    a = np.zeros((2, 2, 2))
    b = np.full((2, 2, 2), 2.0)
    assert volume.mse(a, b) == 4.0
    with pytest.raises(ValueError):
        volume.mse(a, np.zeros((2, 2, 3)))


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_cvol_roundtrip_bitwise(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("cvol") / "v.cvol"
    volume.save(path, arr)
    back = volume.load(path)
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_cvol_layout(tmp_path):
    vol = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    volume.save(tmp_path / "a.cvol", vol)
    raw = (tmp_path / "a.cvol").read_bytes()
    assert raw[:4] == b"CVOL"
    assert struct.unpack("<IIII", raw[4:20]) == (1, 4, 3, 2)
    # x runs fastest
    assert struct.unpack("<3f", raw[20:32]) == (0.0, 1.0, 2.0)


@pytest.mark.parametrize("mutate, err", [
    (lambda raw: b"XVOL" + raw[4:], volume.CvolFormatError),
    (lambda raw: raw[:4] + struct.pack("<I", 2) + raw[8:], volume.CvolFormatError),
    (lambda raw: raw[:-4], volume.CvolTruncatedError),
    (lambda raw: raw[:10], volume.CvolTruncatedError),
    (lambda raw: raw + b"\0\0\0\0", volume.CvolFormatError),
    (lambda raw: raw[:8] + struct.pack("<III", 0, 3, 2) + raw[20:], volume.CvolDimensionError),
])
def test_cvol_corruption(tmp_path, mutate, err):
    volume.save(tmp_path / "a.cvol", np.ones((2, 3, 4), dtype=np.float32))
    raw = (tmp_path / "a.cvol").read_bytes()
    (tmp_path / "b.cvol").write_bytes(mutate(raw))
    with pytest.raises(err):
        volume.load(tmp_path / "b.cvol")


def test_as_volume_rejects_2d():
    with pytest.raises(ValueError):
        volume.as_volume(np.zeros((3, 3)))
