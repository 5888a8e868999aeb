"""Voxel grids, label maps, scribble masks and the preprocessing chain.

Storage order everywhere is (channel, slice, row, col). In-plane spacing is
kept as ``(sx, sy)``: ``sx`` is the column spacing and ``sy`` the row spacing,
both in millimetres, matching the on-disk header.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

N_CLASSES = 6
BACKGROUND, PROSTATE = 0, 1
CANCER_CLASSES = (2, 3, 4, 5)
FOREGROUND_CLASSES = (1, 2, 3, 4, 5)
CLASS_NAMES = ("background", "prostate", "GS 6", "GS 3+4", "GS 4+3", "GS >= 8")

UNANNOTATED = -1


class DegenerateChannelWarning(UserWarning):
    """A constant channel could not be min-max normalized."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    in_plane_spacing_mm: tuple[float, float] = (1.0, 1.0)
    slice_thickness_mm: float = 3.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ValueError(f"volume data must be (C, D, H, W), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dimensions must be >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        _check_spacing(self.in_plane_spacing_mm, self.slice_thickness_mm)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "in_plane_spacing_mm", tuple(float(s) for s in self.in_plane_spacing_mm))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def channel(self, index: int) -> "Volume":
        return replace(self, data=self.data[index : index + 1])


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    in_plane_spacing_mm: tuple[float, float] = (1.0, 1.0)
    slice_thickness_mm: float = 3.0

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"label map must be (D, H, W), got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
            raise ValueError("label values must lie in 0..5")
        object.__setattr__(self, "labels", labels.astype(np.uint8, copy=False))
        object.__setattr__(self, "in_plane_spacing_mm", tuple(float(s) for s in self.in_plane_spacing_mm))

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass
class AnnotationMask:
    """Sparse class labels over a grid, held densely with -1 for unlabeled voxels."""

    classes: np.ndarray
    annotated_slices: list[int] | None = field(default=None)

    def __post_init__(self):
        classes = np.asarray(self.classes)
        if classes.ndim != 3:
            raise ValueError(f"annotation mask must be (D, H, W), got shape {classes.shape}")
        self.classes = classes.astype(np.int8, copy=False)

    @classmethod
    def empty(cls, domain_shape) -> "AnnotationMask":
        return cls(np.full(tuple(domain_shape), UNANNOTATED, dtype=np.int8))

    @property
    def domain_shape(self) -> tuple[int, int, int]:
        return tuple(self.classes.shape)

    @property
    def n_annotated(self) -> int:
        return int(np.count_nonzero(self.classes != UNANNOTATED))

    def entries(self):
        """Yield ``((d, h, w), class)`` for every annotated voxel in storage order."""
        for pos in np.argwhere(self.classes != UNANNOTATED):
            yield tuple(int(p) for p in pos), int(self.classes[tuple(pos)])

    def training_slices(self) -> list[int]:
        if self.annotated_slices is not None:
            return list(self.annotated_slices)
        return list(range(self.domain_shape[0]))

    def to_json(self) -> dict:
        out = {
            "domain_shape": list(self.domain_shape),
            "entries": [{"pos": list(pos), "class": k} for pos, k in self.entries()],
        }
        if self.annotated_slices is not None:
            out["annotated_slices"] = sorted(int(s) for s in self.annotated_slices)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotationMask":
        mask = cls.empty(obj["domain_shape"])
        for entry in obj["entries"]:
            k = int(entry["class"])
            if not 0 <= k < N_CLASSES:
                raise ValueError(f"annotation class {k} out of range")
            mask.classes[tuple(entry["pos"])] = k
        if "annotated_slices" in obj:
            mask.annotated_slices = [int(s) for s in obj["annotated_slices"]]
        return mask


def _check_spacing(spacing, thickness=1.0):
    if len(spacing) != 2 or min(spacing) <= 0 or thickness <= 0:
        raise ValueError(f"spacings must be positive, got {tuple(spacing)} / {thickness}")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def resample_in_plane(v: Volume, target_spacing_mm=(1.0, 1.0)) -> Volume:
    """Bilinear in-plane resampling; slices and slice thickness are untouched.

    Output voxel centres are placed at ``(i + 0.5) * target`` mm and sampled
    from the input at ``(i + 0.5) * target / spacing - 0.5`` with edge
    clamping, so a grid already at the target spacing is returned unchanged.
    """
    _check_spacing(target_spacing_mm)
    sx, sy = v.in_plane_spacing_mm
    tx, ty = (float(t) for t in target_spacing_mm)
    C, D, H, W = v.data.shape
    new_h = max(1, int(round(H * sy / ty)))
    new_w = max(1, int(round(W * sx / tx)))
    if (new_h, new_w) == (H, W) and (sx, sy) == (tx, ty):
        return replace(v, data=v.data.copy())

    rows = np.clip((np.arange(new_h) + 0.5) * ty / sy - 0.5, 0, H - 1)
    cols = np.clip((np.arange(new_w) + 0.5) * tx / sx - 0.5, 0, W - 1)
    dd, rr, cc = np.meshgrid(np.arange(D, dtype=float), rows, cols, indexing="ij")
    coords = np.stack([dd, rr, cc])
    out = np.stack(
        [ndimage.map_coordinates(v.data[c].astype(np.float64), coords, order=1, mode="nearest") for c in range(C)]
    )
    return Volume(out.astype(v.data.dtype, copy=False), (tx, ty), v.slice_thickness_mm)


def _crop_window(n: int, size: int) -> slice:
    start = (n - size) // 2
    return slice(start, start + size)


def center_crop(v, size_px: int):
    """Centered in-plane crop of a Volume, LabelMap or (…, H, W) array.

    With an odd margin the extra row/column is dropped on the high-index side.
    """
    arr = v.data if isinstance(v, Volume) else v.labels if isinstance(v, LabelMap) else np.asarray(v)
    H, W = arr.shape[-2:]
    if size_px < 1 or size_px > H or size_px > W:
        raise ValueError(f"crop size {size_px} does not fit in-plane shape {(H, W)}")
    window = (..., _crop_window(H, size_px), _crop_window(W, size_px))
    if isinstance(v, Volume):
        return replace(v, data=v.data[window].copy())
    if isinstance(v, LabelMap):
        return replace(v, labels=v.labels[window].copy())
    return arr[window].copy()


def normalize_intensity(v: Volume) -> Volume:
    """Per-channel min-max scaling to [0, 1] over the whole 3D channel."""
    out = np.empty(v.data.shape, dtype=np.float64)
    for c, chan in enumerate(v.data):
        lo, hi = float(chan.min()), float(chan.max())
        if hi == lo:
            warnings.warn(f"channel {c} is constant ({lo}); mapped to zeros", DegenerateChannelWarning, stacklevel=2)
            out[c] = 0.0
        else:
            out[c] = (chan - lo) / (hi - lo)
    dtype = v.data.dtype if np.issubdtype(v.data.dtype, np.floating) else np.float64
    return replace(v, data=out.astype(dtype, copy=False))


def stack_channels(t2w_like: Volume, adc_like: Volume) -> Volume:
    if t2w_like.grid_shape != adc_like.grid_shape:
        raise ValueError(f"grid shapes differ: {t2w_like.grid_shape} vs {adc_like.grid_shape}")
    if (
        t2w_like.in_plane_spacing_mm != adc_like.in_plane_spacing_mm
        or t2w_like.slice_thickness_mm != adc_like.slice_thickness_mm
    ):
        raise ValueError("volumes have different spacing")
    data = np.concatenate([t2w_like.data, adc_like.data], axis=0)
    return Volume(data, t2w_like.in_plane_spacing_mm, t2w_like.slice_thickness_mm)


def preprocess(v: Volume, target_spacing_mm=(1.0, 1.0), crop_px: int | None = None) -> Volume:
    """resample -> crop -> normalize."""
    v = resample_in_plane(v, target_spacing_mm)
    if crop_px is not None:
        v = center_crop(v, crop_px)
    return normalize_intensity(v)


# ---------------------------------------------------------------------------
# on-disk format: raw little-endian buffer + JSON sidecar
# ---------------------------------------------------------------------------


def _header_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_volume(v: Volume, path) -> None:
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    header = {
        "shape": list(v.data.shape),
        "spacing_mm": list(v.in_plane_spacing_mm),
        "slice_thickness_mm": v.slice_thickness_mm,
        "dtype": "f32",
    }
    _header_path(path).write_text(json.dumps(header, indent=1))


def save_labels(m: LabelMap, path) -> None:
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(m.labels, dtype="u1").tobytes())
    header = {
        "shape": list(m.labels.shape),
        "spacing_mm": list(m.in_plane_spacing_mm),
        "slice_thickness_mm": m.slice_thickness_mm,
        "dtype": "u8",
    }
    _header_path(path).write_text(json.dumps(header, indent=1))


def _read_raw(path: Path):
    header = json.loads(_header_path(path).read_text())
    dtype = {"f32": "<f4", "u8": "u1"}[header["dtype"]]
    arr = np.frombuffer(path.read_bytes(), dtype=dtype).reshape(header["shape"])
    return arr.copy(), header


def load_volume(path) -> Volume:
    arr, header = _read_raw(Path(path))
    if header["dtype"] != "f32":
        raise ValueError(f"{path} is not a volume file")
    return Volume(arr, tuple(header["spacing_mm"]), header["slice_thickness_mm"])


def load_labels(path) -> LabelMap:
    arr, header = _read_raw(Path(path))
    if header["dtype"] != "u8":
        raise ValueError(f"{path} is not a label file")
    return LabelMap(arr, tuple(header["spacing_mm"]), header["slice_thickness_mm"])


def save_annotation(mask: AnnotationMask, path) -> None:
    Path(path).write_text(json.dumps(mask.to_json()))


def load_annotation(path) -> AnnotationMask:
    return AnnotationMask.from_json(json.loads(Path(path).read_text()))
