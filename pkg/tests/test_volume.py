import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvdrisk.errors import DegenerateVolume, EmptyBox
from cvdrisk.volume import (
    CALCIFICATION_RANGE,
    FAT_RANGE,
    BoundingBox3D,
    CTVolume,
    HURange,
    crop,
    hu_mask,
    normalize_for_net,
    resample_to_shape,
)


def make_vol(voxels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return CTVolume(np.asarray(voxels, dtype=np.float32), spacing, origin)


class TestHUMask:
    def test_calcification_strict_lower_bound(self):
        vol = make_vol(np.full((8, 8, 8), 131.0))
        assert hu_mask(vol, CALCIFICATION_RANGE).bits.all()
        vol_at = make_vol(np.full((8, 8, 8), 130.0))
        assert not hu_mask(vol_at, CALCIFICATION_RANGE).bits.any()

    def test_fat_inclusive_bounds(self):
        vol = make_vol(np.full((8, 8, 8), -190.0))
        assert hu_mask(vol, FAT_RANGE).bits.all()
        vol_hi = make_vol(np.full((8, 8, 8), -30.0))
        assert hu_mask(vol_hi, FAT_RANGE).bits.all()
        vol_out = make_vol(np.full((8, 8, 8), -29.0))
        assert not hu_mask(vol_out, FAT_RANGE).bits.any()

    def test_air_volume_all_false(self):
        vol = make_vol(np.full((8, 8, 8), -1000.0))
        assert hu_mask(vol, CALCIFICATION_RANGE).count == 0

    def test_mask_shape_matches(self):
        vol = make_vol(np.zeros((9, 10, 11)))
        assert hu_mask(vol, FAT_RANGE).bits.shape == (9, 10, 11)

    def test_calc_and_fat_disjoint_on_random_volumes(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            vol = make_vol(rng.uniform(-1024, 3071, size=(10, 10, 10)))
            calc = hu_mask(vol, CALCIFICATION_RANGE).bits
            fat = hu_mask(vol, FAT_RANGE).bits
            assert not (calc & fat).any()

    def test_bad_range_rejected(self):
        with pytest.raises(ValueError):
            HURange(10.0, 10.0)


class TestResample:
    def test_identity_is_voxel_exact(self):
        rng = np.random.default_rng(1)
        vol = make_vol(rng.uniform(-1000, 1000, size=(128, 128, 128)))
        out = resample_to_shape(vol, (128, 128, 128))
        np.testing.assert_array_equal(out.voxels, vol.voxels)

    def test_constant_volume_is_fixed_point(self):
        vol = make_vol(np.full((32, 32, 32), 123.0), spacing=(2.0, 2.0, 2.0))
        out = resample_to_shape(vol, (16, 16, 16))
        np.testing.assert_allclose(out.voxels, 123.0, rtol=0, atol=1e-4)
        assert out.shape == (16, 16, 16)

    def test_constant_mean_preserved_exactly_without_downsampling(self):
        vol = make_vol(np.full((16, 16, 16), -77.0))
        out = resample_to_shape(vol, (32, 32, 32))
        np.testing.assert_array_equal(out.voxels, -77.0)

    def test_physical_extent_preserved(self):
        vol = make_vol(np.zeros((40, 50, 60)), spacing=(2.0, 1.5, 1.0))
        out = resample_to_shape(vol, (16, 16, 16))
        np.testing.assert_allclose(out.physical_extent_mm(), vol.physical_extent_mm())

    def test_sphere_centroid_preserved_in_mm(self):
        # 200 x 180 x 160 mm phantom with an off-center sphere
        shape = (100, 90, 80)
        spacing = (2.0, 2.0, 2.0)
        zz, yy, xx = np.meshgrid(*(np.arange(n) * s for n, s in zip(shape, spacing)),
                                 indexing="ij")
        center = (120.0, 80.0, 70.0)
        sphere = ((zz - center[0]) ** 2 + (yy - center[1]) ** 2
                  + (xx - center[2]) ** 2) <= 30.0 ** 2
        vol = make_vol(np.where(sphere, 500.0, -1000.0), spacing=spacing)
        out = resample_to_shape(vol, (128, 128, 128))

        def centroid_mm(v):
            # independent brute-force sum over voxels
            fg = v.voxels > -250.0
            idx = np.argwhere(fg).astype(float)
            pos = idx * np.array(v.spacing) + np.array(v.origin)
            return pos.mean(axis=0)

        src_c = centroid_mm(vol)
        out_c = centroid_mm(out)
        tol = max(out.spacing)
        assert np.all(np.abs(src_c - out_c) < tol)

    def test_degenerate_source_rejected(self):
        vol = make_vol(np.zeros((1, 16, 16)))
        with pytest.raises(DegenerateVolume):
            resample_to_shape(vol, (16, 16, 16))


class TestCrop:
    def test_full_box_identity(self):
        rng = np.random.default_rng(2)
        vol = make_vol(rng.normal(size=(12, 13, 14)))
        out = crop(vol, BoundingBox3D.full(vol.shape))
        np.testing.assert_array_equal(out.voxels, vol.voxels)
        assert out.origin == vol.origin

    def test_unit_box(self):
        vol = make_vol(np.arange(10 * 10 * 10).reshape(10, 10, 10))
        out = crop(vol, BoundingBox3D(5, 5, 5, 5, 5, 5))
        assert out.shape == (1, 1, 1)
        assert out.voxels[0, 0, 0] == vol.voxels[5, 5, 5]

    def test_clamped_crop_equals_index_slice(self):
        rng = np.random.default_rng(3)
        vol = make_vol(rng.normal(size=(20, 20, 20)))
        box = BoundingBox3D(10, 12, 8, 22, 21, 19)  # exceeds bounds by 3/2/0
        out = crop(vol, box, clamp=True)
        expected = vol.voxels[8:20, 12:20, 10:20]
        np.testing.assert_array_equal(out.voxels, expected)

    def test_out_of_bounds_without_clamping_raises(self):
        vol = make_vol(np.zeros((10, 10, 10)))
        with pytest.raises(EmptyBox):
            crop(vol, BoundingBox3D(0, 0, 0, 12, 9, 9), clamp=False)

    def test_disjoint_box_raises_empty(self):
        vol = make_vol(np.zeros((10, 10, 10)))
        with pytest.raises(EmptyBox):
            crop(vol, BoundingBox3D(50, 50, 50, 60, 60, 60))

    def test_origin_updated_in_mm(self):
        vol = make_vol(np.zeros((10, 10, 10)), spacing=(2.0, 3.0, 4.0),
                       origin=(1.0, 1.0, 1.0))
        out = crop(vol, BoundingBox3D(2, 3, 4, 9, 9, 9))
        assert out.origin == (1.0 + 4 * 2.0, 1.0 + 3 * 3.0, 1.0 + 2 * 4.0)

    def test_crop_full_box_idempotent(self):
        rng = np.random.default_rng(4)
        vol = make_vol(rng.normal(size=(9, 9, 9)))
        once = crop(vol, BoundingBox3D.full(vol.shape))
        twice = crop(once, BoundingBox3D.full(once.shape))
        np.testing.assert_array_equal(once.voxels, twice.voxels)


class TestNormalize:
    def test_clamp_endpoints_and_midpoint(self):
        vol = make_vol(np.array([[[-1024.0, 1024.0, 0.0, -2000.0, 3000.0]]]))
        out = normalize_for_net(vol)
        np.testing.assert_allclose(out[0, 0], [0.0, 1.0, 0.5, 0.0, 1.0])

    @given(st.floats(-1100, 3100), st.floats(-1100, 3100))
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, a, b):
        lo, hi = sorted([a, b])
        arr = np.array([[[lo, hi]]], dtype=np.float32)
        out = normalize_for_net(arr)
        assert out[0, 0, 0] <= out[0, 0, 1]


class TestCTVolumeInvariants:
    def test_bad_spacing_rejected(self):
        with pytest.raises(DegenerateVolume):
            CTVolume(np.zeros((8, 8, 8), dtype=np.float32), (0.0, 1.0, 1.0))
        with pytest.raises(DegenerateVolume):
            CTVolume(np.zeros((8, 8, 8), dtype=np.float32), (math.nan, 1.0, 1.0))

    def test_non_3d_rejected(self):
        with pytest.raises(DegenerateVolume):
            CTVolume(np.zeros((8, 8), dtype=np.float32), (1.0, 1.0, 1.0))
