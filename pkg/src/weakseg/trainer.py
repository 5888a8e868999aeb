"""Training loop, balanced folds and augmentation for the three regimes.

Regimes:

* ``fully-supervised``: weighted cross-entropy + soft Dice on dense labels.
* ``partial-ce``: scribble cross-entropy only (size weight forced to 0).
* ``partial-ce-tags``: scribble cross-entropy + image-tag size penalty.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from .grid import UNANNOTATED
from .losses import WeakLossConfig, batch_tags, supervised_class_weights, supervised_loss, weak_loss
from .unet import UNet

log = logging.getLogger(__name__)

REGIMES = ("fully-supervised", "partial-ce", "partial-ce-tags")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``model`` holds the last good parameters."""

    def __init__(self, message, model, history):
        super().__init__(message)
        self.model = model
        self.history = history


@dataclass
class TrainConfig:
    regime: str = "partial-ce-tags"
    lr0: float = 1e-3
    lr_decay: float = 0.5
    plateau_patience: int = 25
    min_delta: float = 1e-4
    l2_gamma: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 60
    seed: int = 0
    folds: int = 5
    replicates: int = 4
    augment: bool = True

    def validate(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr0 must be positive and lr_decay in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 0 or self.folds < 2 or self.replicates < 1:
            raise ValueError("batch_size, max_epochs, folds and replicates are out of range")
        if self.l2_gamma < 0 or self.plateau_patience < 1:
            raise ValueError("l2_gamma must be >= 0 and plateau_patience >= 1")


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    folds: list[list[str]]

    def train_ids(self, k: int) -> list[str]:
        return [pid for i, f in enumerate(self.folds) if i != k for pid in f]

    def val_ids(self, k: int) -> list[str]:
        return list(self.folds[k])

    def class_counts(self, lesion_classes: dict[str, list[int]]) -> np.ndarray:
        counts = np.zeros((len(self.folds), 4), dtype=int)
        for i, f in enumerate(self.folds):
            for pid in f:
                for c in lesion_classes[pid]:
                    counts[i, c - 2] += 1
        return counts


def make_folds(lesion_classes: dict[str, list[int]], k: int = 5, seed: int = 0) -> FoldSplit:
    """Greedy lesion-balanced split.

    Patients are taken by descending lesion count (ties by id) and each goes to
    the fold that minimises the summed per-class variance of lesion counts,
    then the fold with fewest patients, then the lowest index. ``seed`` only
    permutes the order of the finished folds.
    """
    ids = sorted(lesion_classes)
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} patients")
    order = sorted(ids, key=lambda pid: (-len(lesion_classes[pid]), pid))
    counts = np.zeros((k, 4))
    folds: list[list[str]] = [[] for _ in range(k)]
    for pid in order:
        vec = np.zeros(4)
        for c in lesion_classes[pid]:
            vec[c - 2] += 1
        best = None
        for f in range(k):
            trial = counts.copy()
            trial[f] += vec
            key = (round(float(trial.var(axis=0).sum()), 12), len(folds[f]), f)
            if best is None or key < best:
                best = key
        f = best[2]
        counts[f] += vec
        folds[f].append(pid)
    perm = np.random.default_rng(seed).permutation(k)
    return FoldSplit([sorted(folds[i]) for i in perm])


def manifest_lesion_classes(manifest: dict) -> dict[str, list[int]]:
    return {p["id"]: [int(l["class"]) for l in p["lesions"]] for p in manifest["patients"]}


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentParams:
    flip: bool = False
    angle_deg: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.angle_deg == 0 and self.shift == (0.0, 0.0)


def draw_augment(rng: np.random.Generator) -> AugmentParams:
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-10.0, 10.0))
    shift = tuple(float(s) for s in rng.uniform(-5.0, 5.0, size=2))
    return AugmentParams(flip, angle, shift)


def _affine(arr: np.ndarray, p: AugmentParams, order: int, cval: float) -> np.ndarray:
    H, W = arr.shape
    theta = np.deg2rad(p.angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    center = np.array([(H - 1) / 2, (W - 1) / 2])
    # output o samples input at R^T (o - c - t) + c
    matrix = rot.T
    offset = center - matrix @ (center + np.asarray(p.shift))
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="constant", cval=cval)


def apply_augment(image: np.ndarray, labels, annotation, p: AugmentParams):
    """Apply one transform to a (C, H, W) image and its (H, W) label/scribble maps.

    Images are resampled bilinearly, label and scribble maps by nearest
    neighbour; scribble voxels pushed out of frame are lost.
    """
    if p.is_identity:
        return image, labels, annotation
    if p.flip:
        image = image[..., ::-1]
        labels = None if labels is None else labels[..., ::-1]
        annotation = None if annotation is None else annotation[..., ::-1]
    if p.angle_deg != 0 or p.shift != (0.0, 0.0):
        image = np.stack([_affine(ch.astype(np.float64), p, 1, float(ch.min())) for ch in image])
        if labels is not None:
            labels = _affine(labels.astype(np.float64), p, 0, 0.0)
        if annotation is not None:
            annotation = _affine(annotation.astype(np.float64), p, 0, float(UNANNOTATED))
    image = np.ascontiguousarray(image, dtype=np.float32)
    labels = None if labels is None else np.ascontiguousarray(labels).astype(np.uint8)
    annotation = None if annotation is None else np.ascontiguousarray(annotation).astype(np.int8)
    return image, labels, annotation


def augment(image, labels, annotation, rng: np.random.Generator):
    return apply_augment(image, labels, annotation, draw_augment(rng))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.5, patience=25, min_delta=1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.stale = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; returns True when it improved on the best loss."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.stale = 0
            return True
        self.stale += 1
        if self.stale >= self.patience:
            self.lr *= self.factor
            self.stale = 0
        return False


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class PatientData:
    patient_id: str
    image: np.ndarray  # (2, D, H, W), normalized
    truth: np.ndarray  # (D, H, W)
    annotation: np.ndarray | None = None  # (D, H, W), -1 unannotated
    annotated_slices: list[int] | None = None

    def slices_for(self, regime: str) -> list[int]:
        if regime == "fully-supervised" or self.annotated_slices is None:
            return list(range(self.truth.shape[0]))
        return list(self.annotated_slices)


@dataclass
class SliceSet:
    image: np.ndarray  # (2, n, H, W)
    truth: np.ndarray  # (n, H, W)
    annotation: np.ndarray  # (n, H, W)

    def __len__(self):
        return self.truth.shape[0]


def gather_slices(patients: list[PatientData], regime: str) -> SliceSet:
    imgs, truths, anns = [], [], []
    for p in patients:
        idx = p.slices_for(regime)
        if not idx:
            continue
        imgs.append(p.image[:, idx])
        truths.append(p.truth[idx])
        ann = p.annotation if p.annotation is not None else np.full(p.truth.shape, UNANNOTATED, np.int8)
        anns.append(ann[idx])
    if not imgs:
        raise ValueError("no training slices")
    return SliceSet(
        np.concatenate(imgs, axis=1).astype(np.float32), np.concatenate(truths), np.concatenate(anns)
    )


def l2_penalty(model: UNet, gamma: float) -> dc.Tensor:
    total = dc.as_tensor(0.0)
    for p in model.parameters():
        total = total + dc.tsum(dc.square(p))
    return total * gamma


def data_loss(S: dc.Tensor, truth, annotation, regime: str, loss_cfg: WeakLossConfig) -> dc.Tensor:
    if regime == "fully-supervised":
        return supervised_loss(S, truth, supervised_class_weights(loss_cfg))
    cfg = loss_cfg
    if regime == "partial-ce":
        cfg = WeakLossConfig(0.0, loss_cfg.class_weights, loss_cfg.size_domain)
    return weak_loss(S, annotation, batch_tags(annotation), cfg)


def batch_loss(model, image, truth, annotation, regime, loss_cfg, l2_gamma):
    """(total, data term, L2 term) for one batch; image is (2, n, H, W)."""
    S = model(image)
    dl = data_loss(S, truth, annotation, regime, loss_cfg)
    if l2_gamma:
        l2 = l2_penalty(model, l2_gamma)
        return dl + l2, dl, l2
    return dl, dl, dc.as_tensor(0.0)


def evaluate_loss(model: UNet, data: SliceSet, regime, loss_cfg, batch_size=32) -> float:
    """Slice-weighted mean data loss in inference mode."""
    was = model.training
    model.eval()
    total = 0.0
    try:
        with dc.no_grad():
            for s in range(0, len(data), batch_size):
                sl = slice(s, s + batch_size)
                S = model(data.image[:, sl])
                n = S.shape[1]
                total += float(data_loss(S, data.truth[sl], data.annotation[sl], regime, loss_cfg).data) * n
    finally:
        model.train(was)
    return total / len(data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: UNet
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1


def history_csv(history: list[EpochRecord]) -> str:
    lines = ["epoch,train_loss,val_loss,lr"]
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss:.9g},{h.val_loss:.9g},{h.lr:.9g}")
    return "\n".join(lines) + "\n"


def train(
    model: UNet,
    train_patients: list[PatientData],
    val_patients: list[PatientData],
    cfg: TrainConfig,
    loss_cfg: WeakLossConfig | None = None,
    rng: np.random.Generator | None = None,
    on_epoch=None,
) -> TrainResult:
    """Adam with L2 regularisation and a plateau learning-rate schedule.

    The returned model carries the parameters of the best validation epoch.
    ``on_epoch(record, model)`` is called after every epoch.
    """
    cfg.validate()
    loss_cfg = loss_cfg or WeakLossConfig()
    loss_cfg.validate(allow_zero_lambda=True)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    train_set = gather_slices(train_patients, cfg.regime)
    val_set = gather_slices(val_patients, cfg.regime)
    opt = Adam(model.parameters(), lr=cfg.lr0)
    sched = PlateauScheduler(cfg.lr0, cfg.lr_decay, cfg.plateau_patience, cfg.min_delta)
    result = TrainResult(model)
    best_state = model.copy_state()
    n = len(train_set)

    for epoch in range(cfg.max_epochs):
        model.train()
        opt.lr = sched.lr
        perm = rng.permutation(n)
        losses, weights = [], []
        try:
            for s in range(0, n, cfg.batch_size):
                idx = np.sort(perm[s : s + cfg.batch_size])
                img, tru, ann = train_set.image[:, idx], train_set.truth[idx], train_set.annotation[idx]
                if cfg.augment:
                    img, tru, ann = _augment_batch(img, tru, ann, rng)
                model.zero_grad()
                total, _, _ = batch_loss(model, img, tru, ann, cfg.regime, loss_cfg, cfg.l2_gamma)
                value = float(total.data)
                if not math.isfinite(value):
                    raise dc.NonFiniteError(f"training loss is {value}")
                dc.backward(total)
                opt.step()
                losses.append(value)
                weights.append(len(idx))
            val = evaluate_loss(model, val_set, cfg.regime, loss_cfg, cfg.batch_size)
            if not math.isfinite(val):
                raise dc.NonFiniteError(f"validation loss is {val}")
        except dc.NonFiniteError as exc:
            model.load_state_dict(best_state)
            raise TrainingDiverged(f"epoch {epoch}: {exc}; restored best checkpoint", model, result.history) from exc
        lr_used = opt.lr
        if sched.step(val):
            best_state = model.copy_state()
            result.best_epoch = epoch
        train_loss = float(np.average(losses, weights=weights))
        result.history.append(EpochRecord(epoch, train_loss, val, lr_used))
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val, lr_used)
        if on_epoch is not None:
            on_epoch(result.history[-1], model)

    model.load_state_dict(best_state)
    model.eval()
    return result


def _augment_batch(img, tru, ann, rng):
    img, tru, ann = img.copy(), tru.copy(), ann.copy()
    for i in range(tru.shape[0]):
        a, b, c = augment(img[:, i], tru[i], ann[i], rng)
        img[:, i], tru[i], ann[i] = a, b, c
    return img, tru, ann
