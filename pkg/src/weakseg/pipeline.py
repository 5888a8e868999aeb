"""Dataset preparation, evaluation protocols and the fold x replicate driver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .evaluation import (
    UndefinedResultError,
    devente_assign,
    dice,
    extract_lesions,
    froc,
    grade_confusion,
    match_lesions,
    quadratic_kappa,
    sensitivity_at_fp,
    wilcoxon_signed_rank,
)
from .grid import PROSTATE, LabelMap, Volume, normalize_intensity
from .losses import WeakLossConfig
from .phantom import load_patient
from .scribble import CentroidAnnotation, scribbles_from_centroids, scribbles_from_masks
from .trainer import PatientData, TrainConfig, make_folds, manifest_lesion_classes, train
from .unet import UNet, UNetConfig, predict_volume

log = logging.getLogger(__name__)

PROTOCOLS = ("private", "centroid")


@dataclass
class ScribbleConfig:
    mode: str = "masks"
    r_max_px: int = 4
    offset_mm: float = 11.0

    def validate(self):
        if self.mode not in ("masks", "centroids"):
            raise ValueError(f"scribble mode must be 'masks' or 'centroids', got {self.mode!r}")
        if self.r_max_px < 0 or self.offset_mm < 0:
            raise ValueError("r_max_px and offset_mm must be non-negative")


@dataclass
class EvalConfig:
    min_voxels: int = 26
    overlap_frac: float = 0.10
    overlap_denominator: str = "pred"
    score: str = "mean"
    kappa_mode: str = "miss_as_gs6"
    fp_rate: float = 2.0

    def validate(self):
        if self.overlap_denominator not in ("pred", "truth"):
            raise ValueError(f"overlap_denominator must be 'pred' or 'truth', got {self.overlap_denominator!r}")
        if self.score not in ("mean", "max"):
            raise ValueError(f"score must be 'mean' or 'max', got {self.score!r}")
        if self.kappa_mode not in ("miss_as_gs6", "matched_only"):
            raise ValueError(f"kappa_mode must be 'miss_as_gs6' or 'matched_only', got {self.kappa_mode!r}")
        if not 0 <= self.overlap_frac <= 1 or self.min_voxels < 0:
            raise ValueError("overlap_frac must lie in [0, 1] and min_voxels be >= 0")


@dataclass
class Patient:
    """A loaded patient with everything training and evaluation need."""

    patient_id: str
    volume: Volume  # normalized
    truth: LabelMap
    centers: list[CentroidAnnotation] = field(default_factory=list)
    annotation: np.ndarray | None = None
    annotated_slices: list[int] | None = None

    def training_data(self) -> PatientData:
        return PatientData(self.patient_id, self.volume.data, self.truth.labels, self.annotation, self.annotated_slices)


def centroid_annotations(entry: dict) -> list[CentroidAnnotation]:
    return [CentroidAnnotation(tuple(l["center"]), int(l["class"]), l.get("zone", "PZ")) for l in entry["lesions"]]


def scribble_rng(seed: int, index: int) -> np.random.Generator:
    # separate stream from the phantom generator's (seed, index)
    return np.random.default_rng([int(seed), index, 1])


def make_annotation(patient: Patient, index: int, cfg: ScribbleConfig, seed: int):
    if cfg.mode == "masks":
        return scribbles_from_masks(patient.truth, cfg.r_max_px, scribble_rng(seed, index))
    return scribbles_from_centroids(
        patient.centers, patient.truth.grid_shape, cfg.r_max_px, cfg.offset_mm, patient.truth.in_plane_spacing_mm
    )


def build_patients(records, scribble_cfg: ScribbleConfig | None = None, seed: int = 0, annotations=None):
    """Normalize ``(manifest entry, volume, truth)`` records and attach scribbles.

    ``annotations`` maps patient id to a pre-computed AnnotationMask; missing
    ones are generated with ``scribble_cfg`` (skipped when that is None).
    """
    patients = []
    for i, (entry, vol, truth) in enumerate(records):
        p = Patient(entry["id"], normalize_intensity(vol), truth, centroid_annotations(entry))
        mask = (annotations or {}).get(p.patient_id)
        if mask is None and scribble_cfg is not None:
            mask = make_annotation(p, i, scribble_cfg, seed)
        if mask is not None:
            if mask.domain_shape != truth.grid_shape:
                raise ValueError(f"{p.patient_id}: annotation shape {mask.domain_shape} != {truth.grid_shape}")
            p.annotation = mask.classes
            p.annotated_slices = mask.annotated_slices
        patients.append(p)
    return patients


def load_patients(manifest: dict, root, scribble_cfg: ScribbleConfig | None = None, seed: int = 0, annotations=None):
    """Read every manifest patient from disk; see ``build_patients``."""
    records = ((entry, *load_patient(entry, root)) for entry in manifest["patients"])
    return build_patients(records, scribble_cfg, seed, annotations)


def patients_from_samples(samples, manifest: dict, scribble_cfg=None, seed: int = 0, annotations=None):
    """Same as ``load_patients`` for phantoms held in memory."""
    records = ((entry, s.volume, s.truth) for entry, s in zip(manifest["patients"], samples))
    return build_patients(records, scribble_cfg, seed, annotations)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class PatientPrediction:
    patient_id: str
    probs: np.ndarray
    labels: LabelMap
    lesions: list
    truth_lesions: list


def predict_patients(model: UNet, patients: list[Patient], eval_cfg: EvalConfig) -> list[PatientPrediction]:
    out = []
    for p in patients:
        probs, labels = predict_volume(model, p.volume)
        pred = extract_lesions(labels, probs, eval_cfg.min_voxels, eval_cfg.score)
        truth = extract_lesions(p.truth, None, 0)
        out.append(PatientPrediction(p.patient_id, probs, labels, pred, truth))
    return out


def _kappa_or_none(cm):
    try:
        return quadratic_kappa(cm), None
    except UndefinedResultError as exc:
        return None, str(exc)


def private_report(preds: list[PatientPrediction], patients: list[Patient], eval_cfg: EvalConfig):
    """Detection, grading and prostate-overlap metrics with known lesion extents."""
    report: dict = {"protocol": "private", "n_patients": len(preds)}
    per_denominator = {}
    curve_default = None
    for denom in ("pred", "truth"):
        confusions = {m: np.zeros((4, 4), dtype=np.int64) for m in ("miss_as_gs6", "matched_only")}
        for pp in preds:
            res = match_lesions(pp.lesions, pp.truth_lesions, eval_cfg.overlap_frac, denom)
            for m in confusions:
                confusions[m] += grade_confusion(res, pp.truth_lesions, pp.lesions, m)
        curve = froc([(pp.lesions, pp.truth_lesions) for pp in preds], None, eval_cfg.overlap_frac, denom)
        entry = {"sensitivity_at_2fp": sensitivity_at_fp(curve, eval_cfg.fp_rate), "kappa": {}, "confusion": {}}
        for m, cm in confusions.items():
            k, err = _kappa_or_none(cm)
            entry["kappa"][m] = k
            entry["confusion"][m] = cm.tolist()
            if err:
                entry.setdefault("kappa_error", {})[m] = err
        per_denominator[denom] = entry
        if denom == eval_cfg.overlap_denominator:
            curve_default = curve
    chosen = per_denominator[eval_cfg.overlap_denominator]
    report["kappa"] = chosen["kappa"][eval_cfg.kappa_mode]
    report["kappa_mode"] = eval_cfg.kappa_mode
    report["overlap_denominator"] = eval_cfg.overlap_denominator
    report["sensitivity_at_2fp"] = chosen["sensitivity_at_2fp"]
    report["dice_prostate"] = float(
        np.mean([dice(pp.labels.labels >= PROSTATE, p.truth.labels >= PROSTATE) for pp, p in zip(preds, patients)])
    )
    report["froc"] = curve_default.to_json()
    report["confusion"] = chosen["confusion"][eval_cfg.kappa_mode]
    pred_fg = sum(int(np.count_nonzero(pp.labels.labels >= PROSTATE)) for pp in preds)
    true_fg = sum(int(np.count_nonzero(p.truth.labels >= PROSTATE)) for p in patients)
    report["predicted_foreground_ratio"] = pred_fg / true_fg if true_fg else None
    report["n_truth_lesions"] = sum(len(pp.truth_lesions) for pp in preds)
    report["n_pred_lesions"] = sum(len(pp.lesions) for pp in preds)
    report["by_overlap_denominator"] = per_denominator
    return report, curve_default


def centroid_report(preds: list[PatientPrediction], patients: list[Patient]):
    """Grading from lesion centres only: each centre takes the grade of the cluster containing it."""
    cm = np.zeros((4, 4), dtype=np.int64)
    for pp, p in zip(preds, patients):
        assigned = devente_assign(p.centers, pp.lesions)
        for c, g in zip(p.centers, assigned):
            cm[c.gleason_class - 2, g - 2] += 1
    k, err = _kappa_or_none(cm)
    report = {"protocol": "centroid", "n_patients": len(preds), "kappa": k, "confusion": cm.tolist()}
    if err:
        report["kappa_error"] = err
    return report


def evaluate(model: UNet, patients: list[Patient], protocol: str = "private", eval_cfg: EvalConfig | None = None):
    """Returns (report dict, FROC curve or None, predictions)."""
    eval_cfg = eval_cfg or EvalConfig()
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    preds = predict_patients(model, patients, eval_cfg)
    if protocol == "private":
        report, curve = private_report(preds, patients, eval_cfg)
        return report, curve, preds
    return centroid_report(preds, patients), None, preds


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def run_seed(seed: int, fold: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), fold, replicate, 7])


@dataclass
class RunOutcome:
    regime: str
    fold: int
    replicate: int
    report: dict
    model: UNet
    history: list
    curve: object = None
    preds: list = field(default_factory=list)


def run_one(
    patients: list[Patient],
    manifest: dict,
    regime: str,
    fold: int,
    replicate: int,
    model_cfg: UNetConfig,
    train_cfg: TrainConfig,
    loss_cfg: WeakLossConfig,
    eval_cfg: EvalConfig,
) -> RunOutcome:
    split = make_folds(manifest_lesion_classes(manifest), train_cfg.folds, train_cfg.seed)
    val_ids = set(split.val_ids(fold))
    train_p = [p for p in patients if p.patient_id not in val_ids]
    val_p = [p for p in patients if p.patient_id in val_ids]
    rng = run_seed(train_cfg.seed, fold, replicate)
    model = UNet(model_cfg, rng)
    cfg = TrainConfig(**{**train_cfg.__dict__, "regime": regime})
    result = train(model, [p.training_data() for p in train_p], [p.training_data() for p in val_p], cfg, loss_cfg, rng)
    report, curve, preds = evaluate(result.model, val_p, "private", eval_cfg)
    report.update({"regime": regime, "fold": fold, "replicate": replicate, "best_epoch": result.best_epoch})
    return RunOutcome(regime, fold, replicate, report, result.model, result.history, curve, preds)


SUMMARY_METRICS = ("kappa", "sensitivity_at_2fp", "dice_prostate", "predicted_foreground_ratio")


def aggregate(reports: list[dict]) -> dict:
    """Mean and (population) standard deviation of each metric over runs."""
    out = {}
    for m in SUMMARY_METRICS:
        vals = [r[m] for r in reports if r.get(m) is not None]
        out[m] = {
            "mean": float(np.mean(vals)) if vals else None,
            "std": float(np.std(vals)) if vals else None,
            "n": len(vals),
        }
    return out


def compare_regimes(per_regime: dict[str, list[dict]], metric: str = "kappa") -> dict:
    """Pairwise Wilcoxon signed-rank p-values on per-run metrics."""
    names = sorted(per_regime)
    out = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            x = [r.get(metric) for r in per_regime[a]]
            y = [r.get(metric) for r in per_regime[b]]
            key = f"{a} vs {b}"
            if None in x or None in y:
                out[key] = {"p_value": None, "reason": "metric undefined for some runs"}
                continue
            try:
                out[key] = {"p_value": wilcoxon_signed_rank(x, y)}
            except (ValueError, UndefinedResultError) as exc:
                out[key] = {"p_value": None, "reason": str(exc)}
    return out
