"""Static report figures: FROC curves, training histories, overlays.

PNG figures go through matplotlib's Agg canvas. The FROC curve is also
written as a plain CSV and a small hand-built SVG polyline, so the numbers
stay readable without any plotting library.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.colors import ListedColormap
from matplotlib.figure import Figure

from .evaluation import FrocCurve
from .grid import PROSTATE

# background transparent, then prostate and the four grades
LABEL_COLORS = ["#00000000", "#4c9be8", "#f2d43d", "#f29a3d", "#e8563d", "#a01a7d"]
REGIME_COLORS = {"fully-supervised": "#2b6cb0", "partial-ce": "#c53030", "partial-ce-tags": "#2f855a"}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    return path


def froc_csv(curve: FrocCurve) -> str:
    lines = ["threshold,mean_fp_per_patient,sensitivity"]
    for t, (fp, s) in zip(curve.thresholds, curve.points):
        lines.append(f"{t:.9g},{fp:.9g},{s:.9g}")
    return "\n".join(lines) + "\n"


def froc_svg(curves: dict[str, FrocCurve], width: int = 480, height: int = 360, fp_max: float | None = None) -> str:
    """One polyline per curve on linear axes, with ticks and axis labels."""
    left, right, top, bottom = 56, 16, 16, 44
    pw, ph = width - left - right, height - top - bottom
    xs_all = [fp for c in curves.values() for fp, _ in c.points]
    x_max = fp_max if fp_max is not None else max([2.0] + xs_all)
    x_max = max(x_max, 1e-9)

    def px(fp, s):
        return left + pw * min(fp, x_max) / x_max, top + ph * (1.0 - s)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
    ]
    for k in range(6):
        s = k / 5
        _, y = px(0, s)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="#000"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{s:.1f}</text>')
    for k in range(5):
        fp = x_max * k / 4
        x, _ = px(fp, 0)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="#000"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" font-size="11" text-anchor="middle">{fp:.2g}</text>')
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" font-size="12" text-anchor="middle">'
        "mean false positives per patient</text>"
    )
    out.append(
        f'<text x="14" y="{top + ph / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">sensitivity</text>'
    )
    palette = list(REGIME_COLORS.values()) + ["#555555"]
    for i, (name, c) in enumerate(curves.items()):
        color = REGIME_COLORS.get(name, palette[i % len(palette)])
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (px(fp, s) for fp, s in c.points))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(
            f'<text x="{left + pw - 6}" y="{top + 16 + 14 * i}" font-size="11" text-anchor="end" '
            f'fill="{color}">{name}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def froc_png(curves: dict[str, FrocCurve], path, fp_max: float | None = None) -> Path:
    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    for name, c in curves.items():
        fps, sens = zip(*c.points)
        ax.plot(fps, sens, drawstyle="default", label=name, color=REGIME_COLORS.get(name))
    ax.axvline(2.0, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("mean false positives per patient")
    ax.set_ylabel("sensitivity")
    ax.set_ylim(0, 1.02)
    if fp_max is not None:
        ax.set_xlim(0, fp_max)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def history_png(history, path, title: str = "") -> Path:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ep = [h.epoch for h in history]
    ax.plot(ep, [h.train_loss for h in history], label="train")
    ax.plot(ep, [h.val_loss for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def overlay_png(volume, truth, pred, path, slice_index: int | None = None) -> Path:
    """T2-like channel with truth and prediction side by side on one slice."""
    lab = truth.labels
    if slice_index is None:
        area = (lab >= PROSTATE).sum(axis=(1, 2))
        slice_index = int(np.argmax(area))
    img = volume.data[0, slice_index]
    cmap = ListedColormap(LABEL_COLORS)
    fig = Figure(figsize=(6.4, 3.4))
    for k, (title, labels) in enumerate((("truth", lab), ("prediction", pred.labels))):
        ax = fig.add_subplot(1, 2, k + 1)
        ax.imshow(img, cmap="gray", interpolation="nearest")
        ax.imshow(labels[slice_index], cmap=cmap, vmin=0, vmax=5, alpha=0.55, interpolation="nearest")
        ax.set_title(f"{title}, slice {slice_index}", fontsize=9)
        ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def xval_png(summary: dict[str, dict], path, metrics=("dice_prostate", "kappa", "sensitivity_at_2fp")) -> Path:
    """Grouped bars of mean metric per regime with std error bars."""
    regimes = list(summary)
    fig = Figure(figsize=(6, 3.6))
    ax = fig.add_subplot()
    width = 0.8 / max(len(regimes), 1)
    x = np.arange(len(metrics))
    for i, r in enumerate(regimes):
        means = [summary[r][m]["mean"] or 0.0 for m in metrics]
        stds = [summary[r][m]["std"] or 0.0 for m in metrics]
        ax.bar(x + (i - (len(regimes) - 1) / 2) * width, means, width, yerr=stds, label=r, color=REGIME_COLORS.get(r))
    ax.axhline(0, color="k", lw=0.6)
    ax.set_xticks(x, [m.replace("_", " ") for m in metrics])
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)

