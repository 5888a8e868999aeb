import json

import numpy as np
import pytest
from scipy import ndimage

from weakseg.grid import BACKGROUND, CANCER_CLASSES, PROSTATE, load_labels
from weakseg.phantom import (
    DEFAULT_MIX,
    MIN_LESION_VOXELS,
    PhantomConfig,
    PhantomError,
    file_checksum,
    generate_dataset,
    generate_sample,
    load_manifest,
    load_patient,
    patient_rng,
)

SMALL = dict(grid_shape=(12, 64, 64))


def sample(seed=0, index=0, **kw):
    cfg = PhantomConfig(**{**SMALL, **kw})
    return generate_sample(cfg, patient_rng(seed, index))


class TestConfig:
    def test_defaults_valid(self):
        cfg = PhantomConfig()
        cfg.validate()
        assert cfg.grid_shape == (24, 96, 96)
        assert sum(cfg.lesion_class_mix) == pytest.approx(1.0, abs=1e-12)

    def test_default_mix_is_cohort_proportions(self):
        assert DEFAULT_MIX == pytest.approx((104 / 338, 126 / 338, 56 / 338, 52 / 338))

    @pytest.mark.parametrize(
        "kw",
        [
            dict(lesion_class_mix=(0.5, 0.5, 0.1, 0.0)),
            dict(lesion_class_mix=(1.0, 0.0, 0.0)),
            dict(lesion_radius_range_mm=((0.0, 1.0),) * 4),
            dict(lesion_radius_range_mm=((3.0, 2.0),) * 4),
            dict(noise_sigma=-0.1),
            dict(n_patients=0),
            dict(grid_shape=(0, 8, 8)),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PhantomConfig(**kw).validate()


class TestSample:
    def test_deterministic(self):
        a, b = sample(5, 2), sample(5, 2)
        np.testing.assert_array_equal(a.volume.data, b.volume.data)
        np.testing.assert_array_equal(a.truth.labels, b.truth.labels)

    def test_deterministic_without_noise(self):
        a, b = sample(1, noise_sigma=0.0), sample(1, noise_sigma=0.0)
        np.testing.assert_array_equal(a.volume.data, b.volume.data)

    def test_shapes(self):
        s = sample()
        assert s.volume.data.shape == (2, 12, 64, 64)
        assert s.truth.labels.shape == (12, 64, 64)

    def test_degenerate_mix(self):
        for i in range(10):
            s = sample(0, i, lesion_class_mix=(1.0, 0.0, 0.0, 0.0))
            assert all(l.gleason_class == 2 for l in s.lesions)

    def test_lesions_connected_inside_prostate_and_large(self):
        for i in range(8):
            s = sample(3, i)
            region = s.truth.labels >= PROSTATE
            for l in s.lesions:
                assert l.n_voxels >= MIN_LESION_VOXELS
                m = np.zeros_like(region)
                m[tuple(l.voxels.T)] = True
                assert region[m].all()
                _, n = ndimage.label(m, structure=np.ones((3, 3, 3)))
                assert n == 1
                assert np.all(s.truth.labels[m] == l.gleason_class)

    def test_lesions_stay_separate_components(self):
        for i in range(8):
            s = sample(4, i)
            _, n = ndimage.label(s.truth.labels >= CANCER_CLASSES[0], structure=np.ones((3, 3, 3)))
            assert n == len(s.lesions)

    def test_lesion_count_in_range(self):
        counts = {len(sample(7, i).lesions) for i in range(20)}
        assert counts <= {1, 2, 3}

    def test_labels_partition(self):
        s = sample()
        assert set(np.unique(s.truth.labels)) <= set(range(6))
        assert (s.truth.labels == BACKGROUND).any() and (s.truth.labels == PROSTATE).any()

    def test_prostate_near_center(self):
        s = sample()
        com = np.argwhere(s.truth.labels >= PROSTATE).mean(axis=0)
        np.testing.assert_allclose(com, [5.5, 31.5, 31.5], atol=4)

    def test_placement_failure_names_patient(self):
        cfg = PhantomConfig(grid_shape=(4, 16, 16), lesion_radius_range_mm=((20.0, 25.0),) * 4)
        with pytest.raises(PhantomError, match="P007"):
            generate_sample(cfg, patient_rng(0, 7), "P007")

    def test_noise_sigma(self):
        a = sample(2, noise_sigma=0.0)
        b = sample(2, noise_sigma=0.05)
        # the same stream draws the same anatomy; the difference is the noise field
        np.testing.assert_array_equal(a.truth.labels, b.truth.labels)
        diff = (b.volume.data - a.volume.data).astype(np.float64)
        assert diff.std() == pytest.approx(0.05, rel=0.05)


def test_class_frequencies_follow_mix():
    mix = (0.31, 0.37, 0.17, 0.15)
    counts = np.zeros(4)
    i = 0
    while counts.sum() < 500:
        for l in sample(11, i, lesion_class_mix=mix, grid_shape=(8, 48, 48), lesions_per_patient=(1, 1)).lesions:
            counts[l.gleason_class - 2] += 1
        i += 1
    np.testing.assert_allclose(counts / counts.sum(), mix, atol=0.06)


def test_adc_decreases_with_grade():
    cfg = PhantomConfig(**SMALL)
    sums = {c: [] for c in CANCER_CLASSES}
    n = 0
    i = 0
    while n < 100:
        s = generate_sample(cfg, patient_rng(21, i))
        for l in s.lesions:
            sums[l.gleason_class].append(s.volume.data[1][tuple(l.voxels.T)].mean())
            n += 1
        i += 1
    means = [np.mean(sums[c]) for c in CANCER_CLASSES]
    assert all(a > b for a, b in zip(means, means[1:]))


def test_radius_grows_with_grade():
    cfg = PhantomConfig(**SMALL)
    sizes = {c: [] for c in CANCER_CLASSES}
    for i in range(60):
        for l in generate_sample(cfg, patient_rng(5, i)).lesions:
            sizes[l.gleason_class].append(l.n_voxels)
    means = [np.mean(sizes[c]) for c in CANCER_CLASSES]
    assert means[0] < means[-1]


class TestDataset:
    def test_single_patient_roundtrip(self, tmp_path):
        cfg = PhantomConfig(n_patients=1, **SMALL)
        samples, manifest = generate_dataset(cfg, tmp_path)
        loaded, root = load_manifest(tmp_path / "manifest.json")
        assert len(loaded["patients"]) == 1
        vol, lab = load_patient(loaded["patients"][0], root)
        np.testing.assert_array_equal(vol.data, samples[0].volume.data)
        np.testing.assert_array_equal(lab.labels, samples[0].truth.labels)

    def test_manifest_checksum_stable(self, tmp_path):
        cfg = PhantomConfig(n_patients=20, seed=9, **SMALL)
        generate_dataset(cfg, tmp_path / "a")
        generate_dataset(cfg, tmp_path / "b")
        assert file_checksum(tmp_path / "a" / "manifest.json") == file_checksum(tmp_path / "b" / "manifest.json")
        assert file_checksum(tmp_path / "a" / "P013_volume.raw") == file_checksum(tmp_path / "b" / "P013_volume.raw")

    def test_manifest_classes_match_labels(self, tmp_path):
        cfg = PhantomConfig(n_patients=6, **SMALL)
        generate_dataset(cfg, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        for entry in manifest["patients"]:
            labels = load_labels(tmp_path / entry["labels"]).labels
            comp, n = ndimage.label(labels >= 2, structure=np.ones((3, 3, 3)))
            recount = sorted(
                (int(np.bincount(labels[comp == k]).argmax()), int((comp == k).sum())) for k in range(1, n + 1)
            )
            listed = sorted((l["class"], l["n_voxels"]) for l in entry["lesions"])
            assert recount == listed
            for l in entry["lesions"]:
                assert labels[tuple(l["center"])] == l["class"]

    def test_manifest_schema(self, tmp_path):
        _, manifest = generate_dataset(PhantomConfig(n_patients=2, **SMALL), tmp_path)
        entry = manifest["patients"][0]
        assert set(entry) == {"id", "volume", "labels", "lesions"}
        assert set(entry["lesions"][0]) >= {"class", "center", "n_voxels"}
        assert manifest["config"]["n_patients"] == 2

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_dataset(PhantomConfig(n_patients=1, **SMALL), blocker / "sub")
