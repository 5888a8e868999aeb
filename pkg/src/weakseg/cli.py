"""Command-line entry point: ``weakseg <command> ...``.

Exit codes: 0 success, 1 training diverged, 2 configuration or argument
error, 3 file input/output error.
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config, write_resolved
from .evaluation import froc
from .grid import AnnotationMask, load_annotation, save_annotation
from .phantom import PhantomError, generate_dataset, load_manifest
from .pipeline import (
    PROTOCOLS,
    aggregate,
    compare_regimes,
    evaluate,
    load_patients,
    make_annotation,
    patients_from_samples,
    run_one,
)
from .plotting import froc_csv, froc_png, froc_svg, history_png, overlay_png, xval_png
from .scribble import annotation_ratio
from .trainer import REGIMES, TrainingDiverged, history_csv, make_folds, manifest_lesion_classes
from .unet import UNet

log = logging.getLogger("weakseg")

EXIT_DIVERGED = 1
EXIT_CONFIG = 2
EXIT_IO = 3


class InputError(OSError):
    """A required input file is missing or unreadable."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def _prepare_out(out, cfg: RunConfig | None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        write_resolved(cfg, out)
    (out / "VERSION").write_text(f"weakseg {__version__}\n")
    return out


def _read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    try:
        manifest, root = load_manifest(path)
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not manifest.get("patients"):
        raise ValueError(f"manifest {path} lists no patients")
    return manifest, root


def _read_annotations(directory) -> dict[str, AnnotationMask]:
    directory = Path(directory)
    index_path = directory / "annotations.json"
    if not index_path.is_file():
        raise InputError(f"annotation index not found: {index_path}")
    index = json.loads(index_path.read_text())
    return {p["id"]: load_annotation(directory / p["file"]) for p in index["patients"]}


def _dataset(cfg: RunConfig, manifest_arg=None, annotations_arg=None):
    """(manifest, patients): from a manifest on disk when one is given, else phantoms made in memory."""
    annotations_dir = annotations_arg or cfg.scribble.annotations
    annotations = _read_annotations(annotations_dir) if annotations_dir else None
    seed = cfg.data.phantom.seed
    manifest_path = manifest_arg or cfg.data.manifest
    if manifest_path:
        manifest, root = _read_manifest(manifest_path)
        patients = load_patients(manifest, root, cfg.scribble.scribble, seed, annotations)
    else:
        samples, manifest = generate_dataset(cfg.data.phantom)
        patients = patients_from_samples(samples, manifest, cfg.scribble.scribble, seed, annotations)
    return manifest, patients


def _config(path) -> RunConfig:
    if path is not None and not Path(path).is_file():
        raise InputError(f"config file not found: {path}")
    return load_config(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_phantom_gen(args) -> int:
    cfg = _config(args.config)
    out = _prepare_out(args.out, cfg)
    samples, manifest = generate_dataset(cfg.data.phantom, out)
    counts = [0, 0, 0, 0]
    for s in samples:
        for l in s.lesions:
            counts[l.gleason_class - 2] += 1
    print("patients,lesions_gs6,lesions_gs3+4,lesions_gs4+3,lesions_gs8+")
    print(",".join(str(v) for v in [len(samples), *counts]))
    return 0


def cmd_scribble_gen(args) -> int:
    cfg = _config(args.config)
    cfg.scribble.scribble.mode = args.mode
    cfg.validate()
    manifest, root = _read_manifest(args.manifest)
    out = _prepare_out(args.out, cfg)
    patients = load_patients(manifest, root)
    index, total = [], None
    for i, p in enumerate(patients):
        mask = make_annotation(p, i, cfg.scribble.scribble, cfg.data.phantom.seed)
        name = f"{p.patient_id}_scribbles.json"
        save_annotation(mask, out / name)
        entry = {"id": p.patient_id, "file": name, "n_annotated": mask.n_annotated}
        if mask.annotated_slices is not None:
            entry["annotated_slices"] = list(mask.annotated_slices)
        index.append(entry)
        r = annotation_ratio(mask, p.truth)
        total = r if total is None else total + r
    (out / "annotations.json").write_text(_dump({"mode": args.mode, "patients": index}))
    (out / "ratio.json").write_text(_dump(total.to_json()))
    table = total.format_table()
    (out / "ratio.txt").write_text(table + "\n")
    print(table)
    return 0


def _val_patients(cfg: RunConfig, manifest, patients, fold):
    split = make_folds(manifest_lesion_classes(manifest), cfg.train.folds, cfg.train.seed)
    if not 0 <= fold < cfg.train.folds:
        raise ValueError(f"fold must lie in [0, {cfg.train.folds}), got {fold}")
    ids = set(split.val_ids(fold))
    return [p for p in patients if p.patient_id in ids], split


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.regime:
        cfg.train.regime = args.regime
    cfg.validate()
    if not 0 <= args.fold < cfg.train.folds or args.replicate < 0:
        raise ValueError(f"fold must lie in [0, {cfg.train.folds}) and replicate be >= 0")
    manifest, patients = _dataset(cfg, args.manifest, args.annotations)
    out = _prepare_out(args.out, cfg)
    try:
        run = run_one(
            patients, manifest, cfg.train.regime, args.fold, args.replicate,
            cfg.model, cfg.train, cfg.loss, cfg.eval,
        )
    except TrainingDiverged as exc:
        exc.model.save(out / "model.bin")
        (out / "history.csv").write_text(history_csv(exc.history))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    run.model.save(out / "model.bin")
    (out / "history.csv").write_text(history_csv(run.history))
    history_png(run.history, out / "history.png", f"{run.regime}, fold {run.fold}")
    report = _strip(run.report)
    (out / "val_report.json").write_text(_dump(report))
    print(_summary_csv([report]), end="")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file() or not ckpt.with_suffix(".json").is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    model = UNet.load(ckpt)
    manifest, root = _read_manifest(args.manifest)
    patients = load_patients(manifest, root)
    if args.fold is not None:
        patients, _ = _val_patients(cfg, manifest, patients, args.fold)
    out = _prepare_out(args.out, cfg)
    report, curve, preds = evaluate(model, patients, args.protocol, cfg.eval)
    (out / "report.json").write_text(_dump(report))
    if curve is not None:
        (out / "froc.csv").write_text(froc_csv(curve))
        (out / "froc.svg").write_text(froc_svg({"model": curve}))
        froc_png({"model": curve}, out / "froc.png")
    overlay_png(patients[0].volume, patients[0].truth, preds[0].labels, out / "overlay.png")
    print(_dump(_strip(report)), end="")
    return 0


# xval workers inherit the dataset through fork instead of pickling it per job
_SHARED: dict = {}


def _xval_job(job):
    regime, fold, rep = job
    d = _SHARED
    cfg: RunConfig = d["cfg"]
    run = run_one(d["patients"], d["manifest"], regime, fold, rep, cfg.model, cfg.train, cfg.loss, cfg.eval)
    name = f"{regime}_fold{fold}_rep{rep}"
    run.model.save(d["out"] / "runs" / f"{name}.bin")
    (d["out"] / "runs" / f"{name}_history.csv").write_text(history_csv(run.history))
    pairs = [(pp.lesions, pp.truth_lesions) for pp in run.preds]
    return name, run.report, pairs


def cmd_xval(args) -> int:
    cfg = _config(args.config)
    regimes = args.regime or list(REGIMES)
    if args.jobs < 1:
        raise ValueError("--jobs must be >= 1")
    manifest, patients = _dataset(cfg, args.manifest, args.annotations)
    out = _prepare_out(args.out, cfg)
    (out / "runs").mkdir(exist_ok=True)
    jobs = [(r, f, k) for r in regimes for k in range(cfg.train.replicates) for f in range(cfg.train.folds)]
    _SHARED.update(cfg=cfg, patients=patients, manifest=manifest, out=out)
    try:
        if args.jobs == 1:
            results = [_xval_job(j) for j in jobs]
        else:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(args.jobs, mp_context=ctx) as pool:
                results = list(pool.map(_xval_job, jobs))
    finally:
        _SHARED.clear()
    per_regime: dict[str, list[dict]] = {r: [] for r in regimes}
    pooled: dict[str, list] = {r: [] for r in regimes}
    for (regime, _, _), (name, report, pairs) in zip(jobs, results):
        (out / "runs" / f"{name}_report.json").write_text(_dump(report))
        per_regime[regime].append(_strip(report))
        pooled[regime].extend(pairs)
    summary = {r: aggregate(per_regime[r]) for r in regimes}
    curves = {r: froc(pooled[r], None, cfg.eval.overlap_frac, cfg.eval.overlap_denominator) for r in regimes}
    for r, c in curves.items():
        (out / f"froc_{r}.csv").write_text(froc_csv(c))
    (out / "froc.svg").write_text(froc_svg(curves, fp_max=max(4.0, cfg.eval.fp_rate)))
    froc_png(curves, out / "froc.png", fp_max=max(4.0, cfg.eval.fp_rate))
    xval_png(summary, out / "xval.png")
    doc = {
        "folds": cfg.train.folds,
        "replicates": cfg.train.replicates,
        "regimes": summary,
        "wilcoxon_kappa": compare_regimes(per_regime, "kappa"),
        "runs": [name for name, _, _ in results],
    }
    (out / "summary.json").write_text(_dump(doc))
    text = _summary_csv([rep for r in regimes for rep in per_regime[r]])
    (out / "runs.csv").write_text(text)
    agg = _aggregate_csv(summary)
    (out / "summary.csv").write_text(agg)
    print(agg, end="")
    return 0


def _strip(report: dict) -> dict:
    """Report without the bulky per-threshold fields, for console and summaries."""
    return {k: v for k, v in report.items() if k not in ("froc", "by_overlap_denominator")}


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}" if isinstance(v, float) else str(v)


def _summary_csv(reports: list[dict]) -> str:
    cols = ["regime", "fold", "replicate", "kappa", "sensitivity_at_2fp", "dice_prostate", "predicted_foreground_ratio"]
    lines = [",".join(cols)]
    for r in reports:
        lines.append(",".join(_fmt(r.get(c)) for c in cols))
    return "\n".join(lines) + "\n"


def _aggregate_csv(summary: dict) -> str:
    lines = ["regime,metric,mean,std,n"]
    for regime, metrics in summary.items():
        for m, s in metrics.items():
            lines.append(f"{regime},{m},{_fmt(s['mean'])},{_fmt(s['std'])},{s['n']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakseg", description="Scribble-supervised segmentation on phantoms.")
    parser.add_argument("--version", action="version", version=f"weakseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a phantom dataset")
    p.add_argument("--config", help="TOML run config (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("scribble-gen", help="synthesize scribble annotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("masks", "centroids"), default="masks")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scribble_gen)

    p = sub.add_parser("train", help="train one fold / replicate")
    p.add_argument("--config")
    p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--manifest", help="dataset manifest (else [data] manifest, else phantoms in memory)")
    p.add_argument("--annotations", help="scribble-gen output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", choices=PROTOCOLS, default="private")
    p.add_argument("--config")
    p.add_argument("--fold", type=int, help="restrict to this fold's validation patients")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("xval", help="cross-validate regimes over folds x replicates")
    p.add_argument("--config")
    p.add_argument("--regime", action="append", choices=REGIMES, help="repeatable; all regimes when omitted")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--manifest")
    p.add_argument("--annotations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_xval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, PhantomError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
