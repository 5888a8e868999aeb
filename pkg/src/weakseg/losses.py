"""Scribble-supervised losses: partial cross-entropy plus image-tag size bounds.

All batched functions take probabilities ``S`` laid out (6, N, H, W) and
per-slice arrays (N, H, W). The size value of class c on slice n is the soft
mass ``V = sum_p S[c, n, p]`` over that slice, and the tag bounds ``(a, b)``
come from which classes that slice's scribbles contain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .grid import FOREGROUND_CLASSES, N_CLASSES, UNANNOTATED

LOG_CLAMP = 1e-7


@dataclass
class WeakLossConfig:
    lam: float = 1e-5
    # classes 1..5: prostate, then the four cancer grades
    class_weights: tuple = (0.12, 0.22, 0.22, 0.22, 0.22)
    size_domain: str = "slice"

    def validate(self, allow_zero_lambda=False):
        if self.lam < 0 or (self.lam == 0 and not allow_zero_lambda):
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if len(self.class_weights) != len(FOREGROUND_CLASSES) or min(self.class_weights) <= 0:
            raise ValueError(f"need 5 positive class weights, got {self.class_weights}")
        if self.size_domain not in ("slice", "volume"):
            raise ValueError(f"size_domain must be 'slice' or 'volume', got {self.size_domain!r}")


@dataclass
class TagBounds:
    """Per-class (a, b) size bounds for classes 1..5."""

    a: np.ndarray = field(default_factory=lambda: np.zeros(5))
    b: np.ndarray = field(default_factory=lambda: np.zeros(5))

    def as_array(self) -> np.ndarray:
        return np.stack([self.a, self.b], axis=-1)


def _present_classes(classes) -> set[int]:
    values = np.unique(np.asarray(classes))
    return {int(v) for v in values if v in FOREGROUND_CLASSES}


def tags_from_annotation(mask, domain_size: int) -> TagBounds:
    """Image-tag prior: (1, |domain|) for classes the scribbles contain, else (0, 0).

    ``mask`` is an AnnotationMask or any array of class ids with -1 for
    unannotated voxels. Background never gets a bound.
    """
    classes = getattr(mask, "classes", mask)
    present = _present_classes(classes)
    a = np.array([1.0 if c in present else 0.0 for c in FOREGROUND_CLASSES])
    b = np.array([float(domain_size) if c in present else 0.0 for c in FOREGROUND_CLASSES])
    return TagBounds(a, b)


def batch_tags(annotations: np.ndarray) -> np.ndarray:
    """Tag bounds for every slice of an (N, H, W) annotation batch, shape (N, 5, 2)."""
    n, h, w = annotations.shape
    out = np.zeros((n, 5, 2))
    for i in range(n):
        out[i] = tags_from_annotation(annotations[i], h * w).as_array()
    return out


def partial_ce(S_c, annotated) -> dc.Tensor:
    """Mean of -log S over the annotated voxels; 0 when nothing is annotated."""
    annotated = np.asarray(annotated, dtype=bool)
    count = int(annotated.sum())
    if count == 0:
        return dc.as_tensor(0.0)
    S_c = dc.as_tensor(S_c)
    logs = dc.log(dc.clip(S_c, LOG_CLAMP, 1.0))
    weight = annotated.astype(S_c.data.dtype)
    return dc.tsum(dc.mul(logs, weight)) * (-1.0 / count)


def size_penalty(V, a, b) -> dc.Tensor:
    """Quadratic penalty for leaving [a, b]: (V-a)^2 below, (V-b)^2 above, else 0."""
    if np.any(np.asarray(a) > np.asarray(b)):
        raise ValueError(f"lower bound {a} exceeds upper bound {b}")
    V = dc.as_tensor(V)
    return dc.square(V - dc.clip(V, a, b))


def weak_loss(S, annotations, tags, cfg: WeakLossConfig) -> dc.Tensor:
    """Weighted sum over classes 1..5 of partial CE + lambda * size penalty.

    ``annotations`` is (N, H, W) with -1 for unannotated voxels and ``tags``
    is (N, 5, 2). With ``size_domain="slice"`` the loss is averaged over the N
    slices; with ``"volume"`` the whole batch is one domain and the bounds of
    the first slice are used (``tags`` should then describe the volume).
    """
    S = dc.as_tensor(S)
    annotations = np.asarray(annotations)
    tags = np.asarray(tags, dtype=np.float64)
    n = S.shape[1]
    dtype = S.data.dtype
    fg = S[1:]  # (5, N, H, W)
    onehot = np.stack([annotations == c for c in FOREGROUND_CLASSES]).astype(dtype)
    weights = np.asarray(cfg.class_weights, dtype=dtype)

    logs = dc.log(dc.clip(fg, LOG_CLAMP, 1.0))
    if cfg.size_domain == "slice":
        counts = onehot.sum(axis=(2, 3))  # (5, N)
        ce_sums = dc.tsum(dc.mul(logs, onehot), axis=(2, 3))
        pce = dc.mul(ce_sums, -1.0 / np.maximum(counts, 1))  # (5, N)
        V = dc.tsum(fg, axis=(2, 3))  # (5, N)
        a, b = tags[:, :, 0].T.astype(dtype), tags[:, :, 1].T.astype(dtype)
    else:
        counts = onehot.sum(axis=(1, 2, 3))
        ce_sums = dc.tsum(dc.mul(logs, onehot), axis=(1, 2, 3))
        pce = dc.mul(ce_sums, -1.0 / np.maximum(counts, 1))  # (5,)
        V = dc.tsum(fg, axis=(1, 2, 3))
        a, b = tags[0, :, 0].astype(dtype), tags[0, :, 1].astype(dtype)
        n = 1
    if np.any(a > b):
        raise ValueError("tag lower bound exceeds upper bound")
    per_class = pce
    if cfg.lam:
        per_class = per_class + dc.mul(size_penalty(V, a, b), dtype.type(cfg.lam))
    w = weights.reshape((5,) + (1,) * (per_class.ndim - 1))
    return dc.tsum(dc.mul(per_class, w)) * (1.0 / n)


def supervised_class_weights(cfg: WeakLossConfig, background_weight: float = 0.12) -> np.ndarray:
    return np.array((background_weight,) + tuple(cfg.class_weights))


def supervised_loss(S, truth, class_weights, dice_eps: float = 1.0) -> dc.Tensor:
    """Weighted cross-entropy over all voxels plus mean soft Dice loss.

    Cross-entropy is the voxel mean of ``w[y] * -log S[y]``. The Dice term is
    averaged over the classes present in ``truth`` across the whole batch.
    """
    S = dc.as_tensor(S)
    truth = np.asarray(truth)
    dtype = S.data.dtype
    onehot = np.stack([truth == c for c in range(N_CLASSES)]).astype(dtype)
    w = np.asarray(class_weights, dtype=dtype).reshape((N_CLASSES,) + (1,) * truth.ndim)
    logs = dc.log(dc.clip(S, LOG_CLAMP, 1.0))
    ce = dc.tsum(dc.mul(logs, onehot * w)) * (-1.0 / truth.size)

    present = [c for c in range(N_CLASSES) if onehot[c].any()]
    spatial = tuple(range(1, S.ndim))
    inter = dc.tsum(dc.mul(S, onehot), axis=spatial)  # (6,)
    s_sum = dc.tsum(S, axis=spatial)
    t_sum = onehot.sum(axis=spatial)
    dice = dc.div(inter * 2.0 + dice_eps, s_sum + (t_sum + dice_eps))
    sel = np.zeros(N_CLASSES, dtype=dtype)
    sel[present] = 1.0 / max(len(present), 1)
    dice_loss = 1.0 - dc.tsum(dc.mul(dice, sel))
    return ce + dice_loss

