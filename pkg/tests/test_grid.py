import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakseg.grid import (
    CANCER_CLASSES,
    N_CLASSES,
    AnnotationMask,
    DegenerateChannelWarning,
    LabelMap,
    Volume,
    center_crop,
    load_annotation,
    load_labels,
    load_volume,
    normalize_intensity,
    preprocess,
    resample_in_plane,
    save_annotation,
    save_labels,
    save_volume,
    stack_channels,
)


def vol(data, spacing=(1.0, 1.0), thickness=3.0):
    return Volume(np.asarray(data, dtype=np.float64), spacing, thickness)


def bilinear_oracle(img, r, c):
    """Direct four-neighbour bilinear formula at fractional (r, c)."""
    H, W = img.shape
    r = min(max(r, 0.0), H - 1)
    c = min(max(c, 0.0), W - 1)
    r0, c0 = int(math.floor(r)), int(math.floor(c))
    r1, c1 = min(r0 + 1, H - 1), min(c0 + 1, W - 1)
    fr, fc = r - r0, c - c0
    return (
        img[r0, c0] * (1 - fr) * (1 - fc)
        + img[r0, c1] * (1 - fr) * fc
        + img[r1, c0] * fr * (1 - fc)
        + img[r1, c1] * fr * fc
    )


class TestTypes:
    def test_class_layout(self):
        assert N_CLASSES == 6
        assert CANCER_CLASSES == (2, 3, 4, 5)

    def test_volume_rejects_non_finite(self):
        with pytest.raises(ValueError):
            vol(np.full((1, 2, 2, 2), np.nan))

    def test_volume_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            vol(np.zeros((1, 2, 2, 2)), spacing=(0.0, 1.0))

    def test_labelmap_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            LabelMap(np.full((2, 2, 2), 6, dtype=np.uint8), (1.0, 1.0), 3.0)

    def test_annotation_entries_and_json_roundtrip(self):
        mask = AnnotationMask.empty((2, 3, 3))
        mask.classes[0, 1, 1] = 1
        mask.classes[1, 2, 0] = 4
        assert list(mask.entries()) == [((0, 1, 1), 1), ((1, 2, 0), 4)]
        assert mask.n_annotated == 2
        back = AnnotationMask.from_json(json.loads(json.dumps(mask.to_json())))
        np.testing.assert_array_equal(back.classes, mask.classes)
        assert back.annotated_slices is None

    def test_annotation_json_rejects_bad_class(self):
        with pytest.raises(ValueError):
            AnnotationMask.from_json({"domain_shape": [1, 2, 2], "entries": [{"pos": [0, 0, 0], "class": 9}]})


class TestResample:
    def test_identity_at_target_spacing(self):
        rng = np.random.default_rng(0)
        v = vol(rng.random((2, 3, 8, 8)))
        out = resample_in_plane(v, (1.0, 1.0))
        np.testing.assert_array_equal(out.data, v.data)

    def test_constant_slice_upsampled(self):
        v = vol(np.full((1, 1, 8, 8), 3.5), spacing=(2.0, 2.0))
        out = resample_in_plane(v, (1.0, 1.0))
        assert out.data.shape == (1, 1, 16, 16)
        assert out.in_plane_spacing_mm == (1.0, 1.0)
        np.testing.assert_allclose(out.data, 3.5)

    def test_ramp_matches_closed_form(self):
        rows, cols = np.mgrid[0:6, 0:7].astype(float)
        img = 2.0 * rows - 0.5 * cols + 1.0
        v = vol(img[None, None], spacing=(2.0, 2.0))
        out = resample_in_plane(v, (1.0, 1.0)).data[0, 0]
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                expected = bilinear_oracle(img, (i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5)
                assert out[i, j] == pytest.approx(expected, abs=1e-12)

    def test_random_field_matches_closed_form_anisotropic(self):
        rng = np.random.default_rng(3)
        img = rng.random((5, 9))
        # sx (columns) 0.75 mm, sy (rows) 1.5 mm
        v = vol(img[None, None], spacing=(0.75, 1.5))
        out = resample_in_plane(v, (1.0, 1.0)).data[0, 0]
        assert out.shape == (round(5 * 1.5), round(9 * 0.75))
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                expected = bilinear_oracle(img, (i + 0.5) * 1 / 1.5 - 0.5, (j + 0.5) / 0.75 - 0.5)
                assert out[i, j] == pytest.approx(expected, abs=1e-12)

    def test_slices_untouched(self):
        v = vol(np.zeros((1, 5, 4, 4)), spacing=(2.0, 2.0), thickness=4.0)
        out = resample_in_plane(v, (1.0, 1.0))
        assert out.data.shape[1] == 5
        assert out.slice_thickness_mm == 4.0

    def test_bad_target(self):
        with pytest.raises(ValueError):
            resample_in_plane(vol(np.zeros((1, 1, 4, 4))), (0.0, 1.0))


class TestCrop:
    def test_identity(self):
        data = np.arange(96 * 96, dtype=float).reshape(1, 1, 96, 96)
        np.testing.assert_array_equal(center_crop(vol(data), 96).data, data)

    def test_even_margin(self):
        data = np.arange(100 * 100, dtype=float).reshape(1, 1, 100, 100)
        out = center_crop(vol(data), 96).data
        np.testing.assert_array_equal(out, data[..., 2:98, 2:98])

    def test_odd_margin_keeps_low_side(self):
        data = np.arange(97 * 97, dtype=float).reshape(1, 1, 97, 97)
        out = center_crop(vol(data), 96).data
        np.testing.assert_array_equal(out, data[..., 0:96, 0:96])

    def test_labelmap_and_array(self):
        lab = LabelMap(np.ones((2, 6, 6), dtype=np.uint8), (1.0, 1.0), 3.0)
        assert center_crop(lab, 4).labels.shape == (2, 4, 4)
        assert center_crop(np.zeros((3, 5, 5)), 3).shape == (3, 3, 3)

    def test_too_large(self):
        with pytest.raises(ValueError):
            center_crop(vol(np.zeros((1, 1, 8, 8))), 9)


class TestNormalize:
    def test_linear_map(self):
        out = normalize_intensity(vol(np.array([2.0, 4.0, 6.0]).reshape(1, 1, 1, 3)))
        np.testing.assert_allclose(out.data.ravel(), [0.0, 0.5, 1.0])

    def test_already_unit_range(self):
        data = np.array([0.0, 0.25, 1.0]).reshape(1, 1, 1, 3)
        np.testing.assert_array_equal(normalize_intensity(vol(data)).data, data)

    def test_constant_channel_warns(self):
        data = np.stack([np.full((1, 2, 2), 7.0), np.arange(4.0).reshape(1, 2, 2)])
        with pytest.warns(DegenerateChannelWarning):
            out = normalize_intensity(vol(data))
        np.testing.assert_array_equal(out.data[0], 0.0)
        assert out.data[1].min() == 0.0 and out.data[1].max() == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_exact_unit_range(self, seed):
        rng = np.random.default_rng(seed)
        data = rng.normal(size=(2, 2, 3, 3)) * rng.uniform(0.1, 100) + rng.uniform(-50, 50)
        out = normalize_intensity(vol(data)).data
        for c in range(2):
            assert out[c].min() == 0.0
            assert out[c].max() == 1.0


class TestStack:
    def test_shapes_and_roundtrip(self):
        rng = np.random.default_rng(1)
        a, b = vol(rng.random((1, 4, 4, 4))), vol(rng.random((1, 4, 4, 4)))
        s = stack_channels(a, b)
        assert s.data.shape == (2, 4, 4, 4)
        np.testing.assert_array_equal(s.channel(0).data, a.data)
        np.testing.assert_array_equal(s.channel(1).data, b.data)

    def test_mismatched_slices(self):
        with pytest.raises(ValueError):
            stack_channels(vol(np.zeros((1, 4, 4, 4))), vol(np.zeros((1, 3, 4, 4))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(0.5, 0.5), (1.0, 1.0), (0.8, 1.25)]))
def test_preprocess_idempotent(seed, spacing):
    rng = np.random.default_rng(seed)
    v = vol(rng.random((2, 2, 20, 20)) * 10, spacing=spacing)
    once = preprocess(v, (1.0, 1.0), crop_px=8)
    twice = preprocess(once, (1.0, 1.0), crop_px=8)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)


def test_crop_is_pure_selection():
    rng = np.random.default_rng(2)
    data = rng.random((1, 2, 11, 13))
    out = center_crop(vol(data), 7).data
    for value in out.ravel():
        assert value in data


class TestIO:
    def test_volume_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        v = Volume(rng.random((2, 3, 4, 5)).astype(np.float32), (0.5, 0.75), 3.0)
        save_volume(v, tmp_path / "v.raw")
        header = json.loads((tmp_path / "v.json").read_text())
        assert header == {"shape": [2, 3, 4, 5], "spacing_mm": [0.5, 0.75], "slice_thickness_mm": 3.0, "dtype": "f32"}
        assert (tmp_path / "v.raw").stat().st_size == 2 * 3 * 4 * 5 * 4
        back = load_volume(tmp_path / "v.raw")
        np.testing.assert_array_equal(back.data, v.data)
        assert back.in_plane_spacing_mm == (0.5, 0.75)

    def test_raw_is_little_endian_storage_order(self, tmp_path):
        data = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
        save_volume(Volume(data, (1.0, 1.0), 1.0), tmp_path / "v.raw")
        np.testing.assert_array_equal(np.frombuffer((tmp_path / "v.raw").read_bytes(), "<f4"), np.arange(8))

    def test_labels_roundtrip(self, tmp_path):
        lab = LabelMap(np.arange(24, dtype=np.uint8).reshape(2, 3, 4) % 6, (1.0, 1.0), 3.0)
        save_labels(lab, tmp_path / "l.raw")
        assert json.loads((tmp_path / "l.json").read_text())["dtype"] == "u8"
        np.testing.assert_array_equal(load_labels(tmp_path / "l.raw").labels, lab.labels)

    def test_loaders_check_dtype(self, tmp_path):
        save_labels(LabelMap(np.zeros((1, 2, 2), np.uint8), (1.0, 1.0), 1.0), tmp_path / "l.raw")
        with pytest.raises(ValueError):
            load_volume(tmp_path / "l.raw")

    def test_annotation_roundtrip(self, tmp_path):
        mask = AnnotationMask.empty((3, 4, 4))
        mask.classes[1, 2, 3] = 2
        mask.annotated_slices = [0, 1, 2]
        save_annotation(mask, tmp_path / "a.json")
        doc = json.loads((tmp_path / "a.json").read_text())
        assert doc["entries"] == [{"pos": [1, 2, 3], "class": 2}]
        back = load_annotation(tmp_path / "a.json")
        np.testing.assert_array_equal(back.classes, mask.classes)
        assert back.annotated_slices == [0, 1, 2]


def test_no_warning_for_normal_channels():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        normalize_intensity(vol(np.arange(8.0).reshape(1, 2, 2, 2)))
