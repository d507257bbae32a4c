"""
Tests for the Volume container, SMV file I/O and unit-matching preprocessing
"""

import json

import numpy as np
import pytest

from mask_fusion.core.errors import (
    LengthMismatchError,
    MalformedHeaderError,
    ShapeError,
    UnknownDtypeError,
)
from mask_fusion.core.volume import (
    ViewAxis,
    Volume,
    normalize_intensity,
    read_volume,
    slice_anchor,
    upsample_to_isotropic,
    write_volume,
)


def _smv(path, header, n_floats):
    path.write_bytes(json.dumps(header).encode() + b"\0" + np.zeros(n_floats, "<f4").tobytes())
    return path


def test_volume_is_read_only_and_reports_xyz_dims():
    v = Volume(np.zeros((4, 3, 2)))
    assert v.dims == (2, 3, 4)
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_mask_volume_must_be_binary():
    with pytest.raises(ShapeError):
        Volume(np.full((2, 2, 2), 0.5), kind="mask")


def test_spacing_must_be_positive():
    with pytest.raises(ShapeError):
        Volume(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))


def test_file_round_trip_is_bitwise(tmp_path, rng):
    v = Volume(rng.normal(size=(3, 4, 5)), spacing=(1.0, 1.0, 8.0))
    m = Volume((rng.random((3, 4, 5)) > 0.5).astype(np.float32), kind="mask")
    assert read_volume(write_volume(v, tmp_path / "v.smv")) == v
    assert read_volume(write_volume(m, tmp_path / "m.smv")) == m


def test_header_is_nul_terminated_json(tmp_path):
    path = write_volume(Volume(np.zeros((4, 3, 2))), tmp_path / "v.smv")
    raw = path.read_bytes()
    header = json.loads(raw[: raw.index(b"\0")])
    assert header["dims"] == [2, 3, 4]
    assert header["layout"] == "x-fastest"
    assert len(raw) - raw.index(b"\0") - 1 == 24 * 4


def test_dims_must_match_payload_length(tmp_path):
    header = {"dims": [2, 3, 4], "spacing_mm": [1, 1, 1], "dtype": "f32"}
    assert read_volume(_smv(tmp_path / "ok.smv", header, 24)).dims == (2, 3, 4)
    with pytest.raises(LengthMismatchError):
        read_volume(_smv(tmp_path / "short.smv", header, 23))


def test_truncated_payload_is_a_length_mismatch(tmp_path):
    path = write_volume(Volume(np.ones((2, 2, 2))), tmp_path / "v.smv")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(LengthMismatchError):
        read_volume(path)


def test_malformed_header(tmp_path):
    (tmp_path / "a.smv").write_bytes(b"{not json}\0")
    with pytest.raises(MalformedHeaderError):
        read_volume(tmp_path / "a.smv")
    (tmp_path / "b.smv").write_bytes(b'{"dims": [1, 1, 1]}')
    with pytest.raises(MalformedHeaderError):
        read_volume(tmp_path / "b.smv")


def test_unknown_dtype(tmp_path):
    header = {"dims": [1, 1, 1], "spacing_mm": [1, 1, 1], "dtype": "f16"}
    with pytest.raises(UnknownDtypeError):
        read_volume(_smv(tmp_path / "v.smv", header, 1))


def test_upsample_axial_repeats_slices(rng):
    lr = Volume(rng.normal(size=(8, 64, 64)), spacing=(1.0, 1.0, 8.0))
    up = upsample_to_isotropic(lr, ViewAxis.AXIAL, 64)
    assert up.data.shape == (64, 64, 64)
    assert up.spacing == (1.0, 1.0, 1.0)
    for s in range(8):
        for k in range(8):
            assert np.array_equal(up.data[s * 8 + k], lr.data[s])
        assert np.array_equal(up.data[slice_anchor(s, 8)], lr.data[s])


def test_upsample_sagittal_uses_x_axis(rng):
    lr = Volume(rng.normal(size=(16, 16, 4)), spacing=(4.0, 1.0, 1.0))
    up = upsample_to_isotropic(lr, ViewAxis.SAGITTAL, 16)
    assert up.data.shape == (16, 16, 16)
    assert np.array_equal(up.data[:, :, 4], lr.data[:, :, 1])
    assert set(np.unique(up.data)) == set(np.unique(lr.data))


def test_upsample_factor_one_is_identity(rng):
    v = Volume(rng.normal(size=(8, 8, 8)))
    assert upsample_to_isotropic(v, ViewAxis.CORONAL, 8) == v


def test_upsample_rejects_non_integer_factor():
    with pytest.raises(ShapeError):
        upsample_to_isotropic(Volume(np.zeros((3, 8, 8))), ViewAxis.AXIAL, 8)


def test_normalize_ramp_uses_nearest_rank_percentiles():
    ramp = Volume(np.arange(101, dtype=np.float32).reshape(1, 1, 101))
    out = normalize_intensity(ramp).data[0, 0]
    assert out[0] == 0.0 and out[2] == 0.0
    assert out[98] == 1.0 and out[100] == 1.0
    assert abs(out[50] - 0.5) < 1e-6


def test_normalize_constant_volume_is_zero():
    out = normalize_intensity(Volume(np.full((3, 3, 3), 7.0)))
    assert not out.data.any()


def test_normalize_range(rng):
    out = normalize_intensity(Volume(rng.normal(size=(6, 6, 6)))).data
    assert out.min() == 0.0 and out.max() == 1.0


def test_normalize_rejects_masks():
    with pytest.raises(ShapeError):
        normalize_intensity(Volume(np.zeros((2, 2, 2)), kind="mask"))
