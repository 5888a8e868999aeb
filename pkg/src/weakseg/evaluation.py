"""Lesion extraction and the detection / grading evaluation protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .grid import BACKGROUND, CANCER_CLASSES, LabelMap

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)
GS6 = CANCER_CLASSES[0]


class UndefinedResultError(ValueError):
    """A statistic is undefined for the given input."""


@dataclass
class LesionRecord:
    voxels: np.ndarray  # (k, 3) integer (slice, row, col)
    gleason_class: int
    score: float = 1.0
    volume_mm3: float = 0.0

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)

    @property
    def n_voxels(self) -> int:
        return len(self.voxels)

    @property
    def center(self) -> tuple[int, int, int]:
        """The lesion voxel closest to the centroid (always inside the lesion)."""
        centroid = self.voxels.mean(axis=0)
        i = int(np.argmin(((self.voxels - centroid) ** 2).sum(axis=1)))
        return tuple(int(v) for v in self.voxels[i])

    def contains(self, pos) -> bool:
        return bool(np.any(np.all(self.voxels == np.asarray(pos), axis=1)))


def _majority_class(labels: np.ndarray) -> int:
    counts = np.bincount(labels, minlength=CANCER_CLASSES[-1] + 1)[list(CANCER_CLASSES)]
    # ties go to the more aggressive grade
    return CANCER_CLASSES[len(counts) - 1 - int(np.argmax(counts[::-1]))]


def extract_lesions(
    label_map,
    prob_maps: np.ndarray | None = None,
    min_voxels: int = 26,
    score: str = "mean",
) -> list[LesionRecord]:
    """26-connected components of the cancer labels, small ones dropped.

    Each lesion takes the majority grade of its voxels and a confidence score
    of ``1 - P(background)`` averaged (``score="mean"``) or maximised
    (``"max"``) over its voxels. Lesions are returned in raster order of
    their first voxel.
    """
    if isinstance(label_map, LabelMap):
        labels = label_map.labels
        sx, sy = label_map.in_plane_spacing_mm
        voxel_mm3 = sx * sy * label_map.slice_thickness_mm
    else:
        labels = np.asarray(label_map)
        voxel_mm3 = 1.0
    if score not in ("mean", "max"):
        raise ValueError(f"score must be 'mean' or 'max', got {score!r}")
    comp, n = ndimage.label(labels >= CANCER_CLASSES[0], structure=CONNECTIVITY_26)
    if n == 0:
        return []
    flat = comp.ravel()
    idx = np.flatnonzero(flat)
    ids = flat[idx]
    order = np.argsort(ids, kind="stable")
    idx, ids = idx[order], ids[order]
    bounds = np.searchsorted(ids, np.arange(1, n + 2))
    fg_prob = None if prob_maps is None else 1.0 - prob_maps[BACKGROUND].ravel()
    lesions = []
    for k in range(n):
        members = idx[bounds[k] : bounds[k + 1]]
        if len(members) < min_voxels:
            continue
        voxels = np.stack(np.unravel_index(members, labels.shape), axis=1)
        if fg_prob is None:
            s = 1.0
        else:
            vals = fg_prob[members]
            s = float(vals.mean() if score == "mean" else vals.max())
        lesions.append(
            LesionRecord(voxels, _majority_class(labels.ravel()[members]), s, len(members) * voxel_mm3)
        )
    return lesions


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


@dataclass
class MatchResult:
    matches: list[tuple[int, int, float]] = field(default_factory=list)  # (truth, pred, overlap fraction)
    false_positives: list[int] = field(default_factory=list)
    missed: list[int] = field(default_factory=list)

    @property
    def n_detected(self) -> int:
        return len(self.matches)


def _keys(voxels: np.ndarray) -> np.ndarray:
    v = voxels.astype(np.int64)
    return (v[:, 0] << 40) | (v[:, 1] << 20) | v[:, 2]


def overlap_counts(pred: list[LesionRecord], truth: list[LesionRecord]) -> np.ndarray:
    """|P ∩ T| for every (pred, truth) pair, shape (len(pred), len(truth))."""
    out = np.zeros((len(pred), len(truth)), dtype=np.int64)
    if not pred or not truth:
        return out
    t_keys = np.concatenate([_keys(t.voxels) for t in truth])
    t_ids = np.concatenate([np.full(t.n_voxels, j) for j, t in enumerate(truth)])
    order = np.argsort(t_keys)
    t_keys, t_ids = t_keys[order], t_ids[order]
    for i, p in enumerate(pred):
        k = _keys(p.voxels)
        pos = np.searchsorted(t_keys, k)
        pos = np.minimum(pos, len(t_keys) - 1)
        hit = t_keys[pos] == k
        out[i] = np.bincount(t_ids[pos[hit]], minlength=len(truth))
    return out


def match_lesions(
    pred: list[LesionRecord],
    truth: list[LesionRecord],
    min_overlap_frac: float = 0.10,
    denominator: str = "pred",
) -> MatchResult:
    """Pair predicted lesions with ground-truth lesions.

    A (P, T) pair qualifies when ``|P ∩ T| >= min_overlap_frac * |P|``
    (``denominator="truth"`` uses ``|T|`` instead). Each truth lesion takes
    its best qualifying prediction: largest overlap, then higher score, then
    lower index. A prediction chosen by no truth lesion is a false positive.
    """
    if denominator not in ("pred", "truth"):
        raise ValueError(f"denominator must be 'pred' or 'truth', got {denominator!r}")
    inter = overlap_counts(pred, truth)
    result = MatchResult()
    chosen = set()
    for j, t in enumerate(truth):
        best = None
        for i, p in enumerate(pred):
            size = p.n_voxels if denominator == "pred" else t.n_voxels
            if inter[i, j] == 0 or inter[i, j] < min_overlap_frac * size - 1e-9 * size:
                continue
            key = (inter[i, j], p.score, -i)
            if best is None or key > best[0]:
                best = (key, i, inter[i, j] / size)
        if best is None:
            result.missed.append(j)
        else:
            result.matches.append((j, best[1], float(best[2])))
            chosen.add(best[1])
    result.false_positives = [i for i in range(len(pred)) if i not in chosen]
    return result


# ---------------------------------------------------------------------------
# grading agreement
# ---------------------------------------------------------------------------


def grade_confusion(
    result: MatchResult,
    truth: list[LesionRecord],
    pred: list[LesionRecord],
    mode: str = "miss_as_gs6",
) -> np.ndarray:
    """4x4 counts, rows = true grade, columns = predicted grade (GS 6 .. GS >= 8).

    ``mode="matched_only"`` counts matched pairs; ``"miss_as_gs6"`` also counts
    every missed truth lesion as graded GS 6.
    """
    if mode not in ("matched_only", "miss_as_gs6"):
        raise ValueError(f"unknown confusion mode {mode!r}")
    cm = np.zeros((4, 4), dtype=np.int64)
    for j, i, _ in result.matches:
        cm[truth[j].gleason_class - GS6, pred[i].gleason_class - GS6] += 1
    if mode == "miss_as_gs6":
        for j in result.missed:
            cm[truth[j].gleason_class - GS6, 0] += 1
    return cm


def quadratic_kappa(cm) -> float:
    """Quadratic-weighted Cohen's kappa of a square confusion matrix."""
    O = np.asarray(cm, dtype=np.float64)
    k = O.shape[0]
    n = O.sum()
    if n < 1:
        raise UndefinedResultError("confusion matrix is empty")
    i, j = np.indices((k, k))
    w = (i - j) ** 2 / (k - 1) ** 2
    E = np.outer(O.sum(axis=1), O.sum(axis=0)) / n
    denom = (w * E).sum()
    if denom == 0:
        raise UndefinedResultError("kappa undefined: no expected disagreement")
    return float(1.0 - (w * O).sum() / denom)


def devente_assign(centers, pred: list[LesionRecord]) -> list[int]:
    """Grade at each reference centre: the class of the predicted lesion containing it, else GS 6."""
    out = []
    keys = [set(_keys(p.voxels).tolist()) for p in pred]
    for c in centers:
        pos = getattr(c, "lesion_center", c)
        key = int(_keys(np.asarray([pos]))[0])
        grade = GS6
        for p, ks in zip(pred, keys):
            if key in ks:
                grade = p.gleason_class
                break
        out.append(grade)
    return out


# ---------------------------------------------------------------------------
# FROC
# ---------------------------------------------------------------------------


@dataclass
class FrocCurve:
    thresholds: list[float]
    points: list[tuple[float, float]]  # (mean FP per patient, sensitivity)

    def to_json(self) -> list[list[float]]:
        return [[fp, s] for fp, s in self.points]


def default_thresholds(patients) -> list[float]:
    scores = sorted({float(l.score) for pred, _ in patients for l in pred}, reverse=True)
    return [math.inf] + scores


def froc(patients, thresholds=None, min_overlap_frac=0.10, denominator="pred") -> FrocCurve:
    """Sensitivity against mean false positives per patient over score thresholds.

    ``patients`` is a sequence of ``(pred_lesions, truth_lesions)``; at each
    threshold only predictions with ``score >= t`` are kept.
    """
    patients = list(patients)
    n_truth = sum(len(t) for _, t in patients)
    if n_truth == 0:
        raise UndefinedResultError("sensitivity undefined without ground-truth lesions")
    if thresholds is None:
        thresholds = default_thresholds(patients)
    thresholds = list(thresholds)
    if any(b > a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be in descending order")
    points = []
    for t in thresholds:
        fp = tp = 0
        for pred, truth in patients:
            kept = [p for p in pred if p.score >= t]
            res = match_lesions(kept, truth, min_overlap_frac, denominator)
            fp += len(res.false_positives)
            tp += res.n_detected
        points.append((fp / len(patients), tp / n_truth))
    return FrocCurve([float(t) for t in thresholds], points)


def sensitivity_at_fp(curve: FrocCurve, fp: float = 2.0) -> float:
    """Linear interpolation of the curve at ``fp``, clamped to its end points."""
    best: dict[float, float] = {}
    for x, s in curve.points:
        best[x] = max(s, best.get(x, 0.0))
    xs = sorted(best)
    return float(np.interp(fp, xs, [best[x] for x in xs]))


# ---------------------------------------------------------------------------
# region overlap and paired test
# ---------------------------------------------------------------------------


def dice(a, b) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def wilcoxon_signed_rank(x, y) -> float:
    """Two-sided p-value of the Wilcoxon signed-rank test on ``y - x``.

    Normal approximation with the tie correction on the variance; zero
    differences are dropped first, no continuity correction.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and equally long")
    if len(x) < 5:
        raise ValueError(f"need at least 5 pairs, got {len(x)}")
    d = y - x
    d = d[d != 0]
    if len(d) == 0:
        raise UndefinedResultError("all paired differences are zero")
    n = len(d)
    ranks = rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    mean = n * (n + 1) / 4
    _, ties = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - (ties**3 - ties).sum() / 48
    if var <= 0:
        raise UndefinedResultError("zero variance in signed ranks")
    z = (w_plus - mean) / math.sqrt(var)
    return float(math.erfc(abs(z) / math.sqrt(2)))
