"""Synthetic scribble annotations and annotation-ratio accounting.

Two procedures are provided. ``scribbles_from_masks`` draws disks inside a
dense ground truth. ``scribbles_from_centroids`` works from lesion centres
alone and infers where the prostate scribble goes.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import (
    CANCER_CLASSES,
    CLASS_NAMES,
    FOREGROUND_CLASSES,
    PROSTATE,
    UNANNOTATED,
    AnnotationMask,
    LabelMap,
)
from .losses import TagBounds, tags_from_annotation  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


class ScribbleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CentroidAnnotation:
    lesion_center: tuple[int, int, int]
    gleason_class: int
    zone: str = "PZ"

    def __post_init__(self):
        if self.gleason_class not in CANCER_CLASSES:
            raise ValueError(f"gleason_class must be one of {CANCER_CLASSES}, got {self.gleason_class}")
        if self.zone not in ("PZ", "TZ"):
            raise ValueError(f"zone must be 'PZ' or 'TZ', got {self.zone!r}")


def disk_offsets(radius: int) -> np.ndarray:
    """Integer offsets (dy, dx) with dy^2 + dx^2 <= r^2."""
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dy**2 + dx**2 <= r * r
    return np.stack([dy[keep], dx[keep]], axis=1)


def disk_footprint(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    return dy**2 + dx**2 <= r * r


def feasible_centers(region: np.ndarray, radius: int) -> np.ndarray:
    """Pixels where a radius-r disk lies wholly inside ``region`` and the frame."""
    region = np.asarray(region, dtype=bool)
    if radius == 0:
        return region.copy()
    return ndimage.binary_erosion(region, structure=disk_footprint(radius), border_value=0)


def _paint_disk(target: np.ndarray, center, radius: int, values) -> None:
    """Write a disk into a 2D array, clipped to the frame. ``values`` may be a map."""
    H, W = target.shape
    off = disk_offsets(radius)
    ys, xs = off[:, 0] + center[0], off[:, 1] + center[1]
    ok = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
    ys, xs = ys[ok], xs[ok]
    target[ys, xs] = values[ys, xs] if isinstance(values, np.ndarray) else values


def _place_disk(region: np.ndarray, r_max: int, rng: np.random.Generator):
    """Largest radius <= r_max with a feasible centre; centre drawn uniformly."""
    for r in range(r_max, -1, -1):
        centers = np.argwhere(feasible_centers(region, r))
        if len(centers):
            return tuple(centers[rng.integers(len(centers))]), r
    return None, None


def scribbles_from_masks(truth: LabelMap, r_max_px: int = 4, rng: np.random.Generator | None = None) -> AnnotationMask:
    """Disk scribbles drawn inside a dense label map.

    On every slice that contains prostate, one disk goes into the
    prostate-minus-lesion tissue, and one disk goes into each lesion's
    cross-section. A disk starts at ``r_max_px`` and shrinks one pixel at a
    time until it fits, down to a single voxel. Lesions are the 26-connected
    components of the cancer labels.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = truth.labels
    if not np.any(labels >= PROSTATE):
        raise ValueError("label map contains no prostate region")
    components, n_lesions = ndimage.label(labels >= CANCER_CLASSES[0], structure=CONNECTIVITY_26)
    mask = AnnotationMask.empty(labels.shape)
    for d in range(labels.shape[0]):
        sl = labels[d]
        if not np.any(sl >= PROSTATE):
            continue
        center, r = _place_disk(sl == PROSTATE, r_max_px, rng)
        if center is None:
            warnings.warn(f"slice {d}: no prostate tissue outside lesions, no prostate scribble", ScribbleWarning)
        else:
            _paint_disk(mask.classes[d], center, r, sl.astype(np.int8))
        comp = components[d]
        for k in np.unique(comp[comp > 0]):
            center, r = _place_disk(comp == k, r_max_px, rng)
            if center is not None:
                _paint_disk(mask.classes[d], center, r, sl.astype(np.int8))
    return mask


def _toward(value: float, target: float, step: float) -> float:
    return value + np.sign(target - value) * step


def prostate_center_from_lesion(center, zone: str, grid_shape, offset_px: float) -> tuple[int, int, int]:
    """Prostate scribble centre inferred from a biopsy lesion centre.

    The column moves ``offset_px`` toward the image centre. The row does the
    same for transition-zone lesions and stays put for peripheral-zone ones.
    """
    d, y, x = center
    _, H, W = grid_shape
    cy, cx = (H - 1) / 2, (W - 1) / 2
    new_x = _toward(x, cx, offset_px)
    new_y = _toward(y, cy, offset_px) if zone == "TZ" else y
    return int(d), int(round(new_y)), int(round(new_x))


def scribbles_from_centroids(
    annotations: list[CentroidAnnotation],
    grid_shape,
    r_px: int = 4,
    offset_mm: float = 11.0,
    spacing_mm: tuple[float, float] = (1.0, 1.0),
) -> AnnotationMask:
    """Lesion and inferred prostate disks around biopsy centres.

    Both disks are copied to the two neighbouring slices (clipped to the
    volume). Only those slices are marked as annotated. Prostate disks are
    drawn first, so lesion disks win where they overlap.
    """
    D, H, W = grid_shape
    mask = AnnotationMask.empty(grid_shape)
    sx, sy = spacing_mm
    if sx != sy:
        raise ValueError("centroid scribbles assume isotropic in-plane spacing")
    offset_px = offset_mm / sx
    slices: set[int] = set()
    lesion_disks, prostate_disks = [], []
    for ann in annotations:
        d, y, x = ann.lesion_center
        if not (0 <= d < D and 0 <= y < H and 0 <= x < W):
            raise ValueError(f"lesion centre {ann.lesion_center} outside grid {tuple(grid_shape)}")
        pd, py, px = prostate_center_from_lesion(ann.lesion_center, ann.zone, grid_shape, offset_px)
        cy, cx = int(np.clip(py, r_px, H - 1 - r_px)), int(np.clip(px, r_px, W - 1 - r_px))
        if (cy, cx) != (py, px):
            warnings.warn(f"prostate scribble at {(pd, py, px)} clipped to {(pd, cy, cx)}", ScribbleWarning)
        prostate_disks.append((pd, (cy, cx)))
        lesion_disks.append((d, (y, x), ann.gleason_class))
    for d, c in prostate_disks:
        for dd in range(max(d - 1, 0), min(d + 1, D - 1) + 1):
            _paint_disk(mask.classes[dd], c, r_px, PROSTATE)
            slices.add(dd)
    for d, c, k in lesion_disks:
        for dd in range(max(d - 1, 0), min(d + 1, D - 1) + 1):
            _paint_disk(mask.classes[dd], c, r_px, k)
            slices.add(dd)
    mask.annotated_slices = sorted(slices)
    return mask


# ---------------------------------------------------------------------------
# annotation ratio
# ---------------------------------------------------------------------------


@dataclass
class RatioReport:
    """Annotated / true voxel counts per foreground class."""

    annotated: dict[int, int]
    truth: dict[int, int]

    def ratio(self, c: int) -> float | None:
        return self.annotated[c] / self.truth[c] if self.truth[c] else None

    @property
    def per_class(self) -> dict[int, float | None]:
        return {c: self.ratio(c) for c in FOREGROUND_CLASSES}

    @property
    def total(self) -> float | None:
        t = sum(self.truth.values())
        return sum(self.annotated.values()) / t if t else None

    def __add__(self, other: "RatioReport") -> "RatioReport":
        return RatioReport(
            {c: self.annotated[c] + other.annotated[c] for c in FOREGROUND_CLASSES},
            {c: self.truth[c] + other.truth[c] for c in FOREGROUND_CLASSES},
        )

    def to_json(self) -> dict:
        return {
            "per_class": {CLASS_NAMES[c]: self.ratio(c) for c in FOREGROUND_CLASSES},
            "total": self.total,
            "annotated_voxels": {CLASS_NAMES[c]: self.annotated[c] for c in FOREGROUND_CLASSES},
            "truth_voxels": {CLASS_NAMES[c]: self.truth[c] for c in FOREGROUND_CLASSES},
        }

    def format_table(self) -> str:
        names = ["Prostate", "GS 6", "GS 3+4", "GS 4+3", "GS >= 8", "Total"]
        values = [self.ratio(c) for c in FOREGROUND_CLASSES] + [self.total]
        cells = ["n/a" if v is None else f"{100 * v:.2f}" for v in values]
        widths = [max(len(n), len(c)) for n, c in zip(names, cells)]
        head = " | ".join(n.rjust(w) for n, w in zip(names, widths))
        row = " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{'Class':<9} | {head}\n{'Ratio (%)':<9} | {row}"


def annotation_ratio(mask: AnnotationMask, truth: LabelMap) -> RatioReport:
    if mask.domain_shape != truth.grid_shape:
        raise ValueError(f"mask shape {mask.domain_shape} differs from label shape {truth.grid_shape}")
    a_counts = np.bincount(mask.classes[mask.classes != UNANNOTATED].ravel(), minlength=6)
    t_counts = np.bincount(truth.labels.ravel(), minlength=6)
    return RatioReport(
        {c: int(a_counts[c]) for c in FOREGROUND_CLASSES},
        {c: int(t_counts[c]) for c in FOREGROUND_CLASSES},
    )
