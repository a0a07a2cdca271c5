"""Pipeline command line: synth, preprocess, build-dataset, train, eval, report.

Each subcommand is deterministic given (inputs, config, seed) and idempotent
on unchanged inputs. Exit status is zero iff no per-item failures occurred.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import metaimage as mio
from .checkpoint import CheckpointError, load_arrays
from .config import ConfigError, PipelineConfig, dump_config, load_config
from .metrics import (ImageEval, MetricsError, evaluate, format_report,
                      match_detections, pr_curve, render_pr_svg,
                      select_operating_threshold)
from .model import DetectionModel, ModelError
from .preprocess import PreprocessError, preprocess_scan
from .projection import GroundTruthBox, project_scan
from .synth import SynthError, generate_corpus
from .train import TrainError, TrainSample, train, validation_items, write_log

log = logging.getLogger(__name__)

IMAGE_STRIDE = 32  # backbone downsampling; slab images are padded to a multiple


class CliError(RuntimeError):
    """Unrecoverable subcommand failure, reported without a traceback."""


# ---- layout under the versioned output root ----

def _root(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_root) / cfg.version


def _preprocessed_dir(cfg: PipelineConfig) -> Path:
    return _root(cfg) / "preprocessed"


def _slabs_dir(cfg: PipelineConfig) -> Path:
    return _root(cfg) / "slabs"


def _manifest_path(cfg: PipelineConfig) -> Path:
    return _root(cfg) / "manifest.txt"


def _checkpoint_path(cfg: PipelineConfig) -> Path:
    return _root(cfg) / "checkpoints" / "best.ckpt"


def _eval_dir(cfg: PipelineConfig, role: str) -> Path:
    return _root(cfg) / "eval" / role


def _snapshot_config(cfg: PipelineConfig) -> None:
    root = _root(cfg)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config_used.yaml").write_text(dump_config(cfg))


# ---- shared sample loading ----

def _pad_to_stride(image: np.ndarray, boxes):
    """Zero-pad bottom/right to the backbone stride; boxes are renormalized.

    Normalized coordinates shrink by old/new extent because the content
    keeps its pixel position while the frame grows.
    """
    h, w = image.shape
    new_h = -(-h // IMAGE_STRIDE) * IMAGE_STRIDE
    new_w = -(-w // IMAGE_STRIDE) * IMAGE_STRIDE
    if (new_h, new_w) == (h, w):
        return image, list(boxes)
    out = np.zeros((new_h, new_w), dtype=np.float64)
    out[:h, :w] = image
    fx, fy = w / new_w, h / new_h
    scaled = [dataclasses.replace(b, cx=b.cx * fx, cy=b.cy * fy,
                                  w=b.w * fx, h=b.h * fy) for b in boxes]
    return out, scaled


def _load_samples(cfg: PipelineConfig, manifest: ds.SplitManifest,
                  role: str) -> list[TrainSample]:
    samples = []
    for entry in manifest.role_entries(role):
        path = _root(cfg) / entry.path
        if not path.exists():
            raise CliError(f"slab image missing: {path}")
        vol = mio.read_volume(path)
        image = np.asarray(vol.voxels[0], dtype=np.float64)
        image, boxes = _pad_to_stride(image, entry.boxes)
        arr = np.array([[b.cx, b.cy, b.w, b.h] for b in boxes],
                       dtype=np.float64).reshape(-1, 4)
        diam = np.array([b.diameter_mm for b in boxes], dtype=np.float64)
        samples.append(TrainSample(slab_id=Path(entry.path).stem, image=image,
                                   boxes=arr, diameters_mm=diam))
    return samples


def _read_manifest(cfg: PipelineConfig) -> ds.SplitManifest:
    path = _manifest_path(cfg)
    if not path.exists():
        raise CliError(f"manifest missing: {path} (run build-dataset first)")
    return ds.parse_manifest(path.read_text())


# ---- synth ----

def cmd_synth(cfg: PipelineConfig, args) -> int:
    out_dir = Path(cfg.scan_dir)
    summary = generate_corpus(cfg.synth, out_dir)
    total = sum(n for _, n in summary)
    log.info("wrote %d scans (%d nodules) to %s", len(summary), total, out_dir)
    _snapshot_config(cfg)
    return 0


# ---- preprocess ----

def _preprocess_one(scan_path: str, out_base: str, cfg: PipelineConfig):
    """Worker body; must stay module-level and picklable for the pool."""
    vol = mio.read_volume(scan_path)
    processed, report = preprocess_scan(vol, cfg.preprocess)
    mio.write_mhd(processed, out_base)
    return report


def _report_row(scan_id: str, report) -> dict:
    return {
        "scan_id": scan_id,
        "threshold": repr(float(report.threshold)),
        "z_lo": str(report.z_range[0]),
        "z_hi": str(report.z_range[1]),
        "reduction_ratio": repr(float(report.reduction_ratio)),
        "empty": str(report.empty),
    }


def _load_report_rows(path: Path) -> dict[str, dict]:
    if not path.exists():
        return {}
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["scan_id"]: row for row in csv.DictReader(fh)}


def cmd_preprocess(cfg: PipelineConfig, args) -> int:
    scan_dir = Path(cfg.scan_dir)
    scans = sorted(scan_dir.glob("*.mhd")) if scan_dir.is_dir() else []
    out_dir = _preprocessed_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports_path = out_dir / "reports.csv"
    old_rows = _load_report_rows(reports_path)

    if not scans:
        log.warning("no scans found in %s; nothing to do", scan_dir)
        return 0

    todo, rows, failures = [], {}, []
    for scan in scans:
        scan_id = scan.stem
        out_mhd = out_dir / f"{scan_id}.mhd"
        fresh = (out_mhd.exists()
                 and out_mhd.stat().st_mtime >= scan.stat().st_mtime
                 and scan_id in old_rows)
        if fresh and not args.force:
            rows[scan_id] = old_rows[scan_id]
            log.info("skip %s (up to date)", scan_id)
        else:
            todo.append((scan_id, scan))

    def record(scan_id, outcome):
        if isinstance(outcome, Exception):
            failures.append((scan_id, outcome))
            log.error("preprocess failed for %s: %s", scan_id, outcome)
        else:
            rows[scan_id] = _report_row(scan_id, outcome)

    if args.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = [(scan_id,
                        pool.submit(_preprocess_one, str(scan),
                                    str(out_dir / scan_id), cfg))
                       for scan_id, scan in todo]
            for scan_id, fut in futures:
                record(scan_id, fut.exception() or fut.result())
    else:
        for scan_id, scan in todo:
            try:
                record(scan_id, _preprocess_one(str(scan), str(out_dir / scan_id), cfg))
            except (mio.MetaImageError, PreprocessError, OSError) as exc:
                record(scan_id, exc)

    with open(reports_path, "w", newline="", encoding="utf-8") as fh:
        fields = ["scan_id", "threshold", "z_lo", "z_hi", "reduction_ratio", "empty"]
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for scan_id in sorted(rows):
            writer.writerow(rows[scan_id])

    _snapshot_config(cfg)
    log.info("preprocessed %d scan(s), skipped %d, failed %d",
             len(todo) - len(failures), len(scans) - len(todo), len(failures))
    return 1 if failures else 0


# ---- build-dataset ----

def _slab_volume(slab, source_meta: mio.VolumeMeta) -> mio.CtVolume:
    image = np.asarray(slab.image, dtype=np.float32)[None]
    z_lo, z_hi = slab.z_range_mm
    meta = mio.VolumeMeta(
        dims=image.shape,
        spacing=(float(z_hi - z_lo), source_meta.spacing[1], source_meta.spacing[2]),
        origin=(float(z_lo), source_meta.origin[1], source_meta.origin[2]),
        element_type="MET_FLOAT",
        big_endian=False,
    )
    return mio.CtVolume(meta=meta, voxels=image)


def cmd_build_dataset(cfg: PipelineConfig, args) -> int:
    pre_dir = _preprocessed_dir(cfg)
    scans = sorted(pre_dir.glob("*.mhd")) if pre_dir.is_dir() else []
    if not scans:
        raise CliError(f"no preprocessed scans in {pre_dir} (run preprocess first)")
    ann_path = Path(cfg.annotations)
    if not ann_path.exists():
        raise CliError(f"annotations file missing: {ann_path}")
    by_scan: dict[str, list] = {}
    for ann in mio.read_annotations(ann_path):
        by_scan.setdefault(ann.series_id, []).append(ann)

    slab_dir = _slabs_dir(cfg)
    slab_dir.mkdir(parents=True, exist_ok=True)
    records = []
    slab_meta = {}
    for scan in scans:
        scan_id = scan.stem
        vol = mio.read_volume(scan)
        pairs = project_scan(vol, by_scan.get(scan_id, []), scan_id,
                             cfg.thickness_mm, cfg.stride_mm)
        for slab, boxes in pairs:
            slab_id = f"{scan_id}_s{slab.slab_index:03d}"
            rel = f"slabs/{slab_id}.mhd"
            mio.write_mhd(_slab_volume(slab, vol.meta), slab_dir / slab_id)
            slab_meta[(scan_id, slab.slab_index)] = vol.meta
            records.append(ds.ManifestEntry(
                scan_id=scan_id, slab_index=slab.slab_index, role="train",
                path=rel, boxes=tuple(boxes)))

    manifest = ds.split(records, cfg.seed, cfg.ratios)
    for role in ds.ROLES:
        try:
            manifest = ds.enforce_sparsity(manifest, role, cfg.rate_for(role))
        except ds.DatasetError as exc:
            members = manifest.role_entries(role)
            pos = sum(e.positive for e in members)
            raise CliError(
                f"sparsity target {cfg.rate_for(role)} infeasible for role "
                f"{role!r} ({pos} positive / {len(members)} total): {exc}"
            ) from exc

    aug_entries = []
    if cfg.augment_copies > 0:
        for entry in manifest.role_entries("train"):
            base = Path(entry.path).stem
            vol = mio.read_volume(_root(cfg) / entry.path)
            for k in range(cfg.augment_copies):
                aug_id = f"{base}-aug{k}"
                rng = ds.slab_rng(cfg.seed, aug_id)
                spec = ds.sample_augmentation(rng)
                image, boxes = ds.augment(vol.voxels[0], entry.boxes, spec, rng)
                meta = dataclasses.replace(vol.meta, element_type="MET_FLOAT")
                out = mio.CtVolume(meta=meta,
                                   voxels=np.asarray(image, dtype=np.float32)[None])
                mio.write_mhd(out, slab_dir / aug_id)
                aug_entries.append(dataclasses.replace(
                    entry, path=f"slabs/{aug_id}.mhd", boxes=tuple(boxes)))
    manifest = ds.rebuild(manifest, manifest.entries + tuple(aug_entries))

    _manifest_path(cfg).write_text(ds.dump_manifest(manifest))
    _snapshot_config(cfg)
    for role, rate in manifest.achieved_rates:
        log.info("role %-5s: %4d slabs, positive rate %.3f",
                 role, len(manifest.role_entries(role)), rate)
    return 0


# ---- train ----

def cmd_train(cfg: PipelineConfig, args) -> int:
    manifest = _read_manifest(cfg)
    train_samples = _load_samples(cfg, manifest, "train")
    val_samples = _load_samples(cfg, manifest, "val")
    if not train_samples:
        raise CliError("train role is empty; rebuild the dataset")

    optim = dataclasses.replace(cfg.optim, seed=cfg.seed)
    model = DetectionModel(cfg.model, seed=cfg.seed)
    ckpt = _checkpoint_path(cfg)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = _root(cfg) / "train_log.csv"
    result = train(model, train_samples, val_samples, optim,
                   checkpoint_path=str(ckpt), log_path=str(log_path),
                   focal=cfg.focal, weights=cfg.loss_weights,
                   val_threshold=cfg.operating_threshold or 0.5)
    _snapshot_config(cfg)
    log.info("best validation AP %.4f at epoch %d; checkpoint %s",
             result.best_val_ap, result.best_epoch, ckpt)
    return 0


# ---- eval / report ----

def _load_model(cfg: PipelineConfig) -> tuple[DetectionModel, dict]:
    ckpt = _checkpoint_path(cfg)
    if not ckpt.exists():
        raise CliError(f"checkpoint missing: {ckpt} (run train first)")
    model = DetectionModel(cfg.model, seed=cfg.seed)
    try:
        arrays, extra = load_arrays(ckpt)
        model.load_state(arrays)
    except (CheckpointError, ModelError) as exc:
        raise CliError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    return model, extra


def _resolve_threshold(cfg: PipelineConfig, args, model,
                       manifest: ds.SplitManifest) -> float:
    if getattr(args, "threshold", None) is not None:
        return float(args.threshold)
    if cfg.operating_threshold is not None:
        return float(cfg.operating_threshold)
    # swept on validation only, so the test role never tunes its own knob
    val_items = validation_items(model, _load_samples(cfg, manifest, "val"))
    threshold, f1 = select_operating_threshold(val_items, cfg.iou_threshold)
    log.info("operating threshold %.4f picked on validation (F1 %.4f)",
             threshold, f1)
    return threshold


def _write_detections(path: Path, samples, items) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slab_id", "score", "cx", "cy", "w", "h"])
        for sample, item in zip(samples, items):
            for score, box in zip(item.det_scores, item.det_boxes):
                writer.writerow([sample.slab_id, repr(float(score)),
                                 *(repr(float(v)) for v in box)])


def cmd_eval(cfg: PipelineConfig, args) -> int:
    manifest = _read_manifest(cfg)
    role = args.role
    samples = _load_samples(cfg, manifest, role)
    if not samples:
        raise CliError(f"role {role!r} is empty in {_manifest_path(cfg)}")
    model, _ = _load_model(cfg)
    threshold = _resolve_threshold(cfg, args, model, manifest)

    items = validation_items(model, samples)
    try:
        report = evaluate(items, threshold, cfg.iou_threshold)
    except MetricsError as exc:
        raise CliError(f"evaluation failed for role {role!r}: {exc}") from exc

    out = _eval_dir(cfg, role)
    out.mkdir(parents=True, exist_ok=True)
    text = format_report(report)
    (out / "report.txt").write_text(text + "\n")
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["threshold", repr(float(threshold))])
        writer.writerow(["ap", repr(float(report.ap))])
        writer.writerow(["ar", repr(float(report.ar))])
        for band in ("small", "medium", "large"):
            writer.writerow([f"ap_{band}", repr(float(report.ap_by_band[band]))])
            writer.writerow([f"ar_{band}", repr(float(report.ar_by_band[band]))])
        writer.writerow(["precision", repr(float(report.precision))])
        writer.writerow(["recall", repr(float(report.recall))])
        writer.writerow(["f1", repr(float(report.f1))])
        writer.writerow(["tp", str(report.tp)])
        writer.writerow(["fp", str(report.fp)])
        writer.writerow(["fn", str(report.fn)])
    _write_detections(out / "detections.csv", samples, items)
    print(text)
    return 0


def _read_detections(path: Path) -> dict[str, tuple[list, list]]:
    out: dict[str, tuple[list, list]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            scores, boxes = out.setdefault(row["slab_id"], ([], []))
            scores.append(float(row["score"]))
            boxes.append([float(row[k]) for k in ("cx", "cy", "w", "h")])
    return out


def cmd_report(cfg: PipelineConfig, args) -> int:
    role = args.role
    out = _eval_dir(cfg, role)
    det_path = out / "detections.csv"
    if not det_path.exists():
        raise CliError(f"detections missing: {det_path} (run eval first)")
    manifest = _read_manifest(cfg)
    detections = _read_detections(det_path)

    items = []
    n_pos = 0
    for entry in manifest.role_entries(role):
        slab_id = Path(entry.path).stem
        scores, boxes = detections.get(slab_id, ([], []))
        # gt boxes re-padded exactly as at eval time so spaces agree
        shape = np.asarray(mio.read_volume(_root(cfg) / entry.path).voxels[0]).shape
        _, gt = _pad_to_stride(np.zeros(shape), entry.boxes)
        items.append(ImageEval(
            det_boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
            det_scores=np.asarray(scores, dtype=np.float64),
            gt_boxes=np.array([[b.cx, b.cy, b.w, b.h] for b in gt],
                              dtype=np.float64).reshape(-1, 4),
            gt_diameters=np.array([b.diameter_mm for b in gt], dtype=np.float64),
        ))
        n_pos += len(gt)
    if n_pos == 0:
        raise CliError(f"role {role!r} has no ground truths to report on")

    flags, scores = [], []
    for item in items:
        res = match_detections(item.det_boxes, item.det_scores,
                               item.gt_boxes, cfg.iou_threshold)
        flags.append(res.tp[np.argsort(res.order)])
        scores.append(item.det_scores)
    flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    scores = np.concatenate(scores) if scores else np.zeros(0)
    curve = pr_curve(flags, scores, n_pos)
    render_pr_svg(curve, out / "pr_curve.svg", title=f"{role} precision-recall")

    metrics_path = out / "metrics.csv"
    threshold = 0.5
    if metrics_path.exists():
        with open(metrics_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["metric"] == "threshold":
                    threshold = float(row["value"])
    report = evaluate(items, threshold, cfg.iou_threshold)
    text = format_report(report)
    (out / "report.txt").write_text(text + "\n")
    print(text)
    log.info("wrote %s and %s", out / "pr_curve.svg", out / "report.txt")
    return 0


# ---- entry point ----

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slabdet",
        description="slab-projection lung nodule detection pipeline")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scan corpus")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="isolate lungs and normalize scans")
    p.add_argument("--force", action="store_true",
                   help="reprocess even when outputs are up to date")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel scan workers")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("build-dataset",
                       help="project slabs, split roles, enforce sparsity")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train the detector on the train role")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run inference and score one role")
    p.add_argument("--role", default="test", choices=list(ds.ROLES))
    p.add_argument("--threshold", type=float,
                   help="operating threshold (default: config, else swept on val)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render PR curve and band table")
    p.add_argument("--role", default="test", choices=list(ds.ROLES))
    p.set_defaults(func=cmd_report)
    return parser


def _load_pipeline_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, seed=args.seed,
            synth=dataclasses.replace(cfg.synth, seed=args.seed))
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_pipeline_config(args)
    except (ConfigError, OSError) as exc:
        log.error("bad config: %s", exc)
        return 2
    try:
        return args.func(cfg, args)
    except (CliError, SynthError, TrainError, mio.MetaImageError,
            mio.AnnotationError, ds.DatasetError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
