"""Synthetic two-channel prostate phantoms with graded lesions.

Each patient is a body cylinder containing an ellipsoidal gland split into a
transition zone (inner, anterior) and a peripheral zone, plus one to three
ellipsoidal lesions inside the gland. In the ADC-like channel, lesion
intensity falls as the grade rises. The expected lesion radius rises with the
grade.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .evaluation import LesionRecord
from .grid import (
    BACKGROUND,
    CANCER_CLASSES,
    PROSTATE,
    LabelMap,
    Volume,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
)

# Table-1 lesion counts of the private cohort: 104, 126, 56, 52 of 338
DEFAULT_MIX = (104 / 338, 126 / 338, 56 / 338, 52 / 338)

# tissue intensities (T2-like, ADC-like)
AIR = (0.05, 0.05)
BODY = (0.20, 0.60)
TZ_TISSUE = (0.55, 0.65)
PZ_TISSUE = (0.75, 0.80)
LESION_T2 = (0.42, 0.38, 0.34, 0.30)
LESION_ADC = (0.55, 0.45, 0.35, 0.25)

MIN_LESION_VOXELS = 26
MAX_ATTEMPTS = 100


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomConfig:
    grid_shape: tuple = (24, 96, 96)
    n_patients: int = 40
    lesion_class_mix: tuple = DEFAULT_MIX
    lesion_radius_range_mm: tuple = ((3.0, 4.5), (3.5, 5.0), (4.0, 5.5), (4.5, 6.0))
    lesions_per_patient: tuple = (1, 3)
    noise_sigma: float = 0.03
    seed: int = 0
    spacing_mm: tuple = (1.0, 1.0)
    slice_thickness_mm: float = 3.0

    def validate(self):
        if len(self.grid_shape) != 3 or min(self.grid_shape) < 1:
            raise ValueError(f"grid_shape must be three positive ints, got {self.grid_shape}")
        if self.n_patients < 1:
            raise ValueError(f"n_patients must be >= 1, got {self.n_patients}")
        mix = np.asarray(self.lesion_class_mix, dtype=float)
        if mix.shape != (4,) or np.any(mix < 0) or abs(mix.sum() - 1) > 1e-9:
            raise ValueError(f"lesion_class_mix must be 4 non-negative weights summing to 1, got {self.lesion_class_mix}")
        radii = np.asarray(self.lesion_radius_range_mm, dtype=float)
        if radii.shape != (4, 2) or np.any(radii <= 0) or np.any(radii[:, 0] > radii[:, 1]):
            raise ValueError(f"lesion_radius_range_mm must be 4 positive (lo, hi) pairs, got {self.lesion_radius_range_mm}")
        lo, hi = self.lesions_per_patient
        if not 0 <= lo <= hi:
            raise ValueError(f"bad lesions_per_patient {self.lesions_per_patient}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if min(self.spacing_mm) <= 0 or self.slice_thickness_mm <= 0:
            raise ValueError("spacings must be positive")

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class PhantomSample:
    volume: Volume
    truth: LabelMap
    lesions: list[LesionRecord]
    patient_id: str
    zones: list[str] = field(default_factory=list)


def patient_id(index: int) -> str:
    return f"P{index:03d}"


def patient_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, index])


def _ellipsoid(coords, center, semi_axes):
    zz, yy, xx = coords
    return (
        ((zz - center[0]) / semi_axes[0]) ** 2
        + ((yy - center[1]) / semi_axes[1]) ** 2
        + ((xx - center[2]) / semi_axes[2]) ** 2
    ) <= 1.0


def generate_sample(cfg: PhantomConfig, rng: np.random.Generator, pid: str = "P000") -> PhantomSample:
    cfg.validate()
    D, H, W = cfg.grid_shape
    sx, sy = cfg.spacing_mm
    th = cfg.slice_thickness_mm
    coords = np.indices((D, H, W), dtype=np.float64)
    center = np.array([(D - 1) / 2, (H - 1) / 2, (W - 1) / 2])

    # body cylinder
    yy, xx = coords[1, 0], coords[2, 0]
    body2d = ((yy - center[1]) / (0.42 * H)) ** 2 + ((xx - center[2]) / (0.46 * W)) ** 2 <= 1.0
    body = np.broadcast_to(body2d, (D, H, W))

    # gland, sizes in mm relative to the field of view
    p_center = center + np.array([rng.uniform(-1, 1), rng.uniform(-3, 3), rng.uniform(-3, 3)])
    p_axes_mm = np.array(
        [rng.uniform(0.30, 0.36) * D * th, rng.uniform(0.20, 0.23) * H * sy, rng.uniform(0.24, 0.27) * W * sx]
    )
    p_axes = p_axes_mm / np.array([th, sy, sx])
    prostate = _ellipsoid(coords, p_center, p_axes)
    tz_center = p_center - np.array([0, 0.25 * p_axes[1], 0])
    tz = prostate & _ellipsoid(coords, tz_center, 0.6 * p_axes)

    labels = np.zeros((D, H, W), dtype=np.uint8)
    labels[prostate] = PROSTATE

    # lesions
    lo, hi = cfg.lesions_per_patient
    n_lesions = int(rng.integers(lo, hi + 1))
    occupied = np.zeros_like(prostate)
    lesions, zones = [], []
    mix = np.asarray(cfg.lesion_class_mix, dtype=float)
    for _ in range(n_lesions):
        grade = int(rng.choice(4, p=mix))
        r_lo, r_hi = cfg.lesion_radius_range_mm[grade]
        # distance (mm) from free gland tissue to the nearest blocked voxel
        depth = ndimage.distance_transform_edt(np.pad(prostate & ~occupied, 1), sampling=(th, sy, sx))[1:-1, 1:-1, 1:-1]
        for _attempt in range(MAX_ATTEMPTS):
            r_mm = rng.uniform(r_lo, r_hi)
            stretch = rng.uniform(0.85, 1.15, size=2)
            axes = np.array([r_mm / th, r_mm * stretch[0] / sy, r_mm * stretch[1] / sx])
            candidates = np.argwhere(depth > r_mm * stretch.max())
            if len(candidates) == 0:
                continue
            c = candidates[rng.integers(len(candidates))].astype(float)
            blob = _ellipsoid(coords, c, axes)
            n = int(blob.sum())
            if n < MIN_LESION_VOXELS or np.any(blob & ~prostate) or np.any(blob & occupied):
                continue
            _, n_comp = ndimage.label(blob, structure=np.ones((3, 3, 3)))
            if n_comp != 1:
                continue
            break
        else:
            raise PhantomError(f"{pid}: could not place lesion inside the prostate after {MAX_ATTEMPTS} attempts")
        cls = CANCER_CLASSES[grade]
        labels[blob] = cls
        # keep a one-voxel gap so lesions never merge under 26-connectivity
        occupied |= ndimage.binary_dilation(blob, structure=np.ones((3, 3, 3)))
        lesions.append(LesionRecord(np.argwhere(blob), cls, 1.0, n * sx * sy * th))
        zones.append("TZ" if tz[tuple(int(round(v)) for v in c)] else "PZ")

    # rendering
    img = np.empty((2, D, H, W))
    for ch in range(2):
        chan = np.where(body, BODY[ch], AIR[ch])
        chan = np.where(prostate, np.where(tz, TZ_TISSUE[ch], PZ_TISSUE[ch]), chan)
        for grade in range(4):
            lvl = (LESION_T2 if ch == 0 else LESION_ADC)[grade]
            chan = np.where(labels == CANCER_CLASSES[grade], lvl, chan)
        chan = ndimage.gaussian_filter(chan, sigma=(0, 0.7, 0.7))
        if cfg.noise_sigma > 0:
            chan = chan + rng.normal(0.0, cfg.noise_sigma, size=chan.shape)
        img[ch] = chan
    volume = Volume(img.astype(np.float32), tuple(cfg.spacing_mm), th)
    truth = LabelMap(labels, tuple(cfg.spacing_mm), th)
    return PhantomSample(volume, truth, lesions, pid, zones)


def manifest_entry(sample: PhantomSample, volume_path: str, labels_path: str) -> dict:
    return {
        "id": sample.patient_id,
        "volume": volume_path,
        "labels": labels_path,
        "lesions": [
            {"class": l.gleason_class, "center": list(l.center), "n_voxels": l.n_voxels, "zone": z}
            for l, z in zip(sample.lesions, sample.zones)
        ],
    }


def generate_dataset(cfg: PhantomConfig, out_dir=None):
    """Generate ``cfg.n_patients`` samples; write them and a manifest if ``out_dir`` is given."""
    cfg.validate()
    samples = [generate_sample(cfg, patient_rng(cfg.seed, i), patient_id(i)) for i in range(cfg.n_patients)]
    entries = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        vol_name, lab_name = f"{s.patient_id}_volume.raw", f"{s.patient_id}_labels.raw"
        if out_dir is not None:
            save_volume(s.volume, out_dir / vol_name)
            save_labels(s.truth, out_dir / lab_name)
        entries.append(manifest_entry(s, vol_name, lab_name))
    manifest = {"patients": entries, "config": cfg.to_json()}
    if out_dir is not None:
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return samples, manifest


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    return json.loads(path.read_text()), path.parent


def load_patient(entry: dict, root: Path) -> tuple[Volume, LabelMap]:
    return load_volume(root / entry["volume"]), load_labels(root / entry["labels"])


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
