# -*- coding: utf-8 -*-
"""Volume container, resampling and normalization checks."""
import numpy as np
import pytest

from errors import AllZeroVolume, MissingFile, SingularTransform, VolumeFormatError
from volume import (
    AffineTransform, Volume3D, median_planes, normalize_intensity, preprocess_volume, read_volume, resize,
    trilinear_sample, warp_affine, write_volume,
)


def _blob(dims, sigma):
    grids = np.meshgrid(*[np.arange(n) - (n - 1) / 2.0 for n in dims], indexing='ij')
    r2 = sum(g ** 2 for g in grids)
    return np.exp(-r2 / (2 * sigma ** 2))


# ── Volume3D ──────────────────────────────────────────────────────────────────

def test_volume_rejects_non_finite():
    data = np.ones((2, 2, 2))
    data[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Volume3D(data)


def test_volume_is_immutable_copy():
    data = np.zeros((2, 3, 4))
    vol = Volume3D(data)
    data[0, 0, 0] = 5.0
    assert vol.data[0, 0, 0] == 0.0
    assert vol.dims == (2, 3, 4)
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0


# ── trilinear_sample ─────────────────────────────────────────────────────────

def test_sample_exact_at_grid_points():
    rng = np.random.default_rng(0)
    vol = Volume3D(rng.normal(size=(4, 5, 6)))
    for i, j, k in [(0, 0, 0), (3, 4, 5), (1, 2, 3)]:
        assert trilinear_sample(vol, (i, j, k)) == vol.data[i, j, k]


def test_sample_constant_volume():
    vol = Volume3D(np.full((5, 5, 5), 2.5))
    assert trilinear_sample(vol, (1.3, 2.7, 3.1)) == pytest.approx(2.5, abs=1e-12)


def test_sample_cube_center_is_corner_mean():
    vol = Volume3D(np.arange(8, dtype=float).reshape(2, 2, 2))
    assert trilinear_sample(vol, (0.5, 0.5, 0.5)) == pytest.approx(3.5, abs=1e-12)


def test_sample_outside_reads_zero():
    vol = Volume3D(np.ones((3, 3, 3)))
    assert trilinear_sample(vol, (-0.5, 1, 1)) == pytest.approx(0.5, abs=1e-12)
    assert trilinear_sample(vol, (10, 1, 1)) == 0.0


# ── warp_affine ──────────────────────────────────────────────────────────────

def test_identity_warp_is_bit_identical():
    rng = np.random.default_rng(1)
    vol = Volume3D(rng.normal(size=(6, 5, 4)))
    out = warp_affine(vol, AffineTransform.identity(vol.center))
    assert np.array_equal(out.data, vol.data)


def test_integer_translation_moves_voxel():
    data = np.zeros((10, 10, 10))
    data[5, 5, 5] = 3.0
    vol = Volume3D(data)
    out = warp_affine(vol, AffineTransform(np.eye(3), (1, 0, 0), vol.center))
    assert out.data[6, 5, 5] == 3.0
    assert np.count_nonzero(out.data) == 1


def test_centered_zoom_preserves_center():
    vol = Volume3D(_blob((9, 9, 9), 2.0))
    out = warp_affine(vol, AffineTransform(2.0 * np.eye(3), np.zeros(3), vol.center))
    assert out.data[4, 4, 4] == pytest.approx(vol.data[4, 4, 4], abs=1e-12)


def test_singular_transform_rejected():
    vol = Volume3D(np.ones((3, 3, 3)))
    with pytest.raises(SingularTransform):
        warp_affine(vol, AffineTransform(np.zeros((3, 3))))


def test_out_dims_must_be_positive():
    vol = Volume3D(np.ones((3, 3, 3)))
    with pytest.raises(ValueError):
        warp_affine(vol, AffineTransform.identity(), (0, 3, 3))


def test_warp_then_inverse_restores_interior():
    from augment import AugmentParams, to_affine

    dims = (24, 24, 24)
    vol = Volume3D(_blob(dims, 5.0))
    t = to_affine(AugmentParams(zoom=1.0, shift=(2 / 24, -1.5 / 24, 1 / 24), angles=(5, -4, 3)), dims)
    back = warp_affine(warp_affine(vol, t), t.inverse())
    interior = (slice(2, -2),) * 3
    assert np.max(np.abs(back.data[interior] - vol.data[interior])) <= 0.05


def test_compose_matches_sequential_application():
    a = AffineTransform(np.diag([1.1, 0.9, 1.0]), (0.5, -1, 2), (3, 3, 3))
    b = AffineTransform(np.array([[1, 0.1, 0], [0, 1, 0], [0, 0, 1.2]]), (1, 0, -0.5), (1, 2, 3))
    p = np.array([0.3, 4.0, -2.0])
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    assert np.allclose(a.compose(a.inverse()).apply(p), p, atol=1e-12)


# ── resize ────────────────────────────────────────────────────────────────────

def test_resize_to_pipeline_target():
    vol = Volume3D(np.ones((256, 256, 166)))
    out = resize(vol, (96, 96, 73))
    assert out.dims == (96, 96, 73)


def test_resize_to_own_dims_is_identity():
    rng = np.random.default_rng(2)
    vol = Volume3D(rng.normal(size=(5, 6, 7)))
    assert np.array_equal(resize(vol, vol.dims).data, vol.data)


def test_resize_preserves_constant():
    vol = Volume3D(np.full((10, 12, 7), 4.25))
    out = resize(vol, (6, 5, 9))
    assert np.allclose(out.data, 4.25, rtol=0, atol=1e-12)


# ── normalize_intensity ──────────────────────────────────────────────────────

def test_normalize_two_values():
    data = np.zeros((3, 3, 3))
    data[0, 0, 0], data[2, 2, 2] = 2.0, 4.0
    out = normalize_intensity(Volume3D(data))
    assert out.data[0, 0, 0] == pytest.approx(-1.0)
    assert out.data[2, 2, 2] == pytest.approx(1.0)
    assert np.count_nonzero(out.data) == 2


def test_normalize_degenerate_sets_flag():
    data = np.zeros((3, 3, 3))
    data[1:, 1:, 1:] = 7.0
    out = normalize_intensity(Volume3D(data))
    assert out.degenerate
    assert not np.any(out.data)


def test_normalize_all_zero_raises():
    with pytest.raises(AllZeroVolume):
        normalize_intensity(Volume3D(np.zeros((2, 2, 2))))


def test_normalize_moments_and_idempotence():
    rng = np.random.default_rng(3)
    data = rng.normal(5.0, 3.0, size=(8, 8, 8))
    data[:2] = 0.0
    out = normalize_intensity(Volume3D(data))
    values = out.data[data != 0]
    assert abs(values.mean()) <= 1e-10
    assert abs(values.std() - 1.0) <= 1e-10
    again = normalize_intensity(out)
    assert np.allclose(again.data, out.data, atol=1e-12)


def test_normalize_center_only_switch():
    data = np.zeros((2, 2, 2))
    data[0, 0, 0], data[1, 1, 1] = 1.0, 5.0
    out = normalize_intensity(Volume3D(data), scale_variance=False)
    assert out.data[0, 0, 0] == pytest.approx(-2.0)
    assert out.data[1, 1, 1] == pytest.approx(2.0)


def test_preprocess_records_steps():
    vol = Volume3D(_blob((10, 10, 8), 3.0), source_id='s1')
    out = preprocess_volume(vol, (6, 6, 5))
    assert out.dims == (6, 6, 5)
    assert out.steps[0].startswith('resize')
    assert out.steps[-1].startswith('normalize')


def test_median_planes_shapes():
    planes = median_planes(Volume3D(np.zeros((4, 5, 6))))
    assert planes['sagittal'].shape == (5, 6)
    assert planes['coronal'].shape == (4, 6)
    assert planes['axial'].shape == (4, 5)


# ── File container ───────────────────────────────────────────────────────────

def test_volume_file_keeps_provenance(tmp_path):
    rng = np.random.default_rng(4)
    vol = Volume3D(rng.normal(size=(3, 4, 5)), source_id='abc', steps=('resize:(3, 4, 5)',))
    path = tmp_path / 'abc.dav'
    write_volume(path, vol)
    back = read_volume(path)
    assert back.dims == (3, 4, 5)
    assert back.source_id == 'abc'
    assert back.steps == vol.steps
    assert np.array_equal(back.data, vol.data.astype(np.float32).astype(np.float64))
    # z varies fastest on disk
    raw = np.frombuffer(path.read_bytes()[20:], dtype='<f4')
    assert raw[1] == np.float32(vol.data[0, 0, 1])


def test_read_volume_errors(tmp_path):
    with pytest.raises(MissingFile):
        read_volume(tmp_path / 'nope.dav')
    bad = tmp_path / 'bad.dav'
    bad.write_bytes(b'XXXX' + bytes(16))
    with pytest.raises(VolumeFormatError):
        read_volume(bad)
    short = tmp_path / 'short.dav'
    write_volume(short, Volume3D(np.ones((2, 2, 2))))
    short.write_bytes(short.read_bytes()[:-4])
    with pytest.raises(VolumeFormatError):
        read_volume(short)
