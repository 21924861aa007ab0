"""Pipeline CLI: segment, label, mask, eval, pipeline, sweep, export-denoise,
retrieve.

Every stage persists its outputs under ``<out>/<run-id>/`` so stages can be
re-run independently. All artifacts are deterministic for a fixed
(manifest, config, seed) except ``timings.json``, which records wall times
and is explicitly excluded from reproducibility comparisons.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .affinity import build_affinity, threshold_adjacency
from .denoise import export_training_set
from .errors import ConfigError, DataError, PatchsegError
from .evalkit import evaluate_dataset, save_report, svg_iou_chart, write_per_class_csv
from .graphseg import SegmentSet, load_segments, louvain, save_segments, split_components
from .maskgen import read_mask_png, resize_mask, synthesize_mask, write_mask_png
from .pseudolabel import (
    assign_segment_labels,
    kmeans,
    load_crops_manifest,
    make_crop_specs,
    mean_patch_crop_features,
    retrieve_neighbors,
    save_crops_manifest,
)
from .tensorio import DatasetManifest, load_manifest, load_patch_features, read_tensor

MEAN_PATCH = "mean-patch"


@dataclass
class RunConfig:
    manifest: str = ""
    out: str = ""
    run_id: str | None = None
    tau: int = 5
    k: int | None = None
    k_list: list[int] | None = None
    seed: int = 0
    weighted_edges: bool = False
    l2_normalize: bool = False
    theta: float = 0.95
    drop_unlabeled: bool = True
    crop_features: str | None = None
    merge_table: str | None = None
    jobs: int = 4
    svg: bool = False

    def resolved_dict(self) -> dict:
        return asdict(self)

    def portable_dict(self) -> dict:
        """Config without its output location, so identical computations
        hash and serialize identically wherever they land."""
        doc = asdict(self)
        doc.pop("out")
        doc.pop("run_id")
        return doc

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.portable_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_CONFIG_KEYS = set(RunConfig().resolved_dict())


def _build_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults < config file < explicit flags."""
    cfg = RunConfig()
    file_path = getattr(args, "config", None)
    if file_path:
        try:
            doc = json.loads(Path(file_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {file_path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        for key, value in doc.items():
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if not cfg.manifest:
        raise ConfigError("a manifest path is required (--manifest)")
    if not Path(cfg.manifest).exists():
        raise ConfigError(f"manifest not found: {cfg.manifest}")
    if cfg.tau < 0:
        raise ConfigError("tau must be non-negative")
    if cfg.k is not None and not 1 <= cfg.k <= 255:
        raise ConfigError("k must be in [1, 255] (255 is the UNLABELED sentinel)")
    if cfg.jobs < 1:
        raise ConfigError("jobs must be at least 1")
    if cfg.run_id is None:
        cfg.run_id = "run-" + cfg.config_hash[:12]
    return cfg


def _run_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ConfigError("an output directory is required (--out)")
    d = Path(cfg.out) / cfg.run_id
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_json(path: Path) -> dict:
    return json.loads(path.read_text()) if path.exists() else {}


def _save_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _update_report(run_dir: Path, cfg: RunConfig, stage: str, payload: dict) -> None:
    report_path = run_dir / "run_report.json"
    doc = _load_json(report_path)
    doc.setdefault("tool_version", __version__)
    doc["config_hash"] = cfg.config_hash
    doc["seed"] = cfg.seed
    doc["config"] = cfg.portable_dict()
    doc.setdefault("stages", {})[stage] = payload
    _save_json(doc, report_path)


def _record_timing(run_dir: Path, stage: str, seconds: float) -> None:
    timings_path = run_dir / "timings.json"
    doc = _load_json(timings_path)
    doc[stage] = seconds
    _save_json(doc, timings_path)


def _resolve_merge(cfg: RunConfig, manifest: DatasetManifest) -> dict[int, int] | None:
    if cfg.merge_table:
        bundled = resources.files("patchseg") / "data" / f"{cfg.merge_table}_merge.json"
        try:
            if "/" not in cfg.merge_table and bundled.is_file():
                raw = json.loads(bundled.read_text())
            else:
                raw = json.loads(Path(cfg.merge_table).read_text())
        except FileNotFoundError:
            raise ConfigError(f"merge table not found: {cfg.merge_table}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"merge table is not valid JSON: {exc}")
        return {int(k): int(v) for k, v in raw.items()}
    return manifest.label_merge


def _num_classes(cfg: RunConfig, manifest: DatasetManifest) -> int:
    """C from the merge table when present, else scanned from GT masks."""
    merge = _resolve_merge(cfg, manifest)
    if merge is not None:
        return max(merge.values()) + 1
    c = -1
    for image in manifest.images:
        if image.gt_mask is None:
            raise DataError("ground truth required for eval")
        gt = read_mask_png(manifest.resolve(image.gt_mask))
        c = max(c, int(gt.max()))
    return c + 1


# ---------------------------------------------------------------------------
# stages


def stage_segment(cfg: RunConfig, manifest: DatasetManifest, run_dir: Path) -> None:
    seg_dir = run_dir / "segments"
    seg_dir.mkdir(exist_ok=True)
    if len({im.patch_side for im in manifest.images}) > 1:
        # the crops manifest carries a single patch side for the extractor
        raise DataError("mixed patch sizes in one dataset are not supported")

    def process(image):
        feats = load_patch_features(manifest, image)
        graph = threshold_adjacency(
            build_affinity(feats),
            (image.grid_rows, image.grid_cols),
            weighted=cfg.weighted_edges,
        )
        partition = louvain(graph)
        segset = split_components(
            partition, graph.grid, cfg.tau, image_id=image.image_id)
        return segset, make_crop_specs(segset, image.patch_side)

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        results = list(pool.map(process, manifest.images))

    all_crops = []
    total = valid = 0
    patch_side = manifest.images[0].patch_side if manifest.images else 0
    for image, (segset, crops) in zip(manifest.images, results):
        save_segments(segset, seg_dir / f"{image.image_id}.segments.json")
        for rec in crops:
            rec.crop_feature_row = len(all_crops)
            all_crops.append(rec)
        total += len(segset.segments)
        valid += segset.num_valid
    save_crops_manifest(all_crops, patch_side, run_dir / "crops.json")
    payload = {
        "images": len(manifest.images),
        "total_segments": total,
        "valid_segments": valid,
        "valid_segment_pct": round(100.0 * valid / total, 4) if total else 0.0,
        "crops": len(all_crops),
    }
    _update_report(run_dir, cfg, "segment", payload)
    print(f"{total} segments across {len(manifest.images)} images, "
          f"{payload['valid_segment_pct']:.2f}% valid")


def _load_crop_features(
    cfg: RunConfig, manifest: DatasetManifest, records
) -> np.ndarray:
    """Crop features aligned with ``records`` order (row i <-> records[i])."""
    if not cfg.crop_features:
        raise ConfigError(
            f"--crop-features is required (a DTF file or {MEAN_PATCH!r})")
    if cfg.crop_features == MEAN_PATCH:
        feats = mean_patch_crop_features(manifest, records)
    else:
        path = Path(cfg.crop_features)
        if not path.exists():
            raise DataError(f"crop feature file not found: {path}")
        feats = read_tensor(path)
        if feats.ndim != 2:
            raise DataError(f"crop features must be 2-D, got {feats.shape}")
        if feats.shape[0] != len(records):
            raise DataError(
                f"row-count mismatch: {feats.shape[0]} feature rows for "
                f"{len(records)} crops in the crops manifest")
        feats = feats[[r.crop_feature_row for r in records]]
    if cfg.l2_normalize:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.maximum(norms, 1e-12)
    return feats


def _canonical_crop_order(manifest: DatasetManifest, records, feats):
    """Reorder crops to (manifest image order, segment id) so results do not
    depend on how the crops manifest happened to be permuted."""
    img_order = {im.image_id: i for i, im in enumerate(manifest.images)}
    order = sorted(
        range(len(records)),
        key=lambda i: (img_order.get(records[i].image_id, len(img_order)),
                       records[i].segment_id))
    reordered = []
    for pos, i in enumerate(order):
        rec = replace(records[i], crop_feature_row=pos)
        reordered.append(rec)
    return reordered, feats[order]


def _write_masks(
    manifest: DatasetManifest,
    labeled: dict[str, SegmentSet],
    run_dir: Path,
    masks_dir: Path,
) -> None:
    masks_dir.mkdir(parents=True, exist_ok=True)
    for image in manifest.images:
        segset = labeled[image.image_id]
        mask = synthesize_mask(segset, image.patch_side)
        mask = resize_mask(mask, image.height, image.width)
        write_mask_png(mask, masks_dir / f"{image.image_id}_pseudo.png")


def stage_label(
    cfg: RunConfig,
    manifest: DatasetManifest,
    run_dir: Path,
    k: int | None = None,
    out_prefix: Path | None = None,
) -> int:
    """k-means over crop features, label segments, synthesize masks.

    Returns the K actually used. ``out_prefix`` redirects labels/masks for
    sweep runs.
    """
    base = out_prefix or run_dir
    crops_path = run_dir / "crops.json"
    if not crops_path.exists():
        raise DataError(f"crops manifest not found: {crops_path} (run segment first)")
    records, _ = load_crops_manifest(crops_path)
    feats = _load_crop_features(cfg, manifest, records)
    records, feats = _canonical_crop_order(manifest, records, feats)
    if k is None:
        k = cfg.k if cfg.k is not None else _num_classes(cfg, manifest)
    if not 1 <= k <= 255:
        raise ConfigError(f"k={k} outside [1, 255]")
    if feats.shape[0] < k:
        raise DataError(
            f"only {feats.shape[0]} valid segments for k={k} clusters")
    model = kmeans(feats, k, cfg.seed)

    labels_dir = base / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)
    labeled = {}
    for image in manifest.images:
        segset = load_segments(run_dir / "segments" / f"{image.image_id}.segments.json")
        labeled[image.image_id] = assign_segment_labels(segset, records, model)
        save_segments(labeled[image.image_id],
                      labels_dir / f"{image.image_id}.segments.json")
    _write_masks(manifest, labeled, run_dir, base / "masks")
    _save_json({
        "k": k,
        "seed": cfg.seed,
        "inertia": model.inertia,
        "iterations": len(model.inertia_history),
        "cluster_sizes": np.bincount(model.assignment, minlength=k).tolist(),
    }, base / "clusters.json")
    if out_prefix is None:
        _update_report(run_dir, cfg, "label", {
            "k": k,
            "inertia": model.inertia,
            "crops": len(records),
        })
    return k


def stage_mask(cfg: RunConfig, manifest: DatasetManifest, run_dir: Path) -> None:
    labels_dir = run_dir / "labels"
    if not labels_dir.exists():
        raise DataError(f"labeled segments not found: {labels_dir} (run label first)")
    labeled = {
        image.image_id: load_segments(labels_dir / f"{image.image_id}.segments.json")
        for image in manifest.images
    }
    _write_masks(manifest, labeled, run_dir, run_dir / "masks")
    _update_report(run_dir, cfg, "mask", {"images": len(manifest.images)})


def stage_eval(
    cfg: RunConfig,
    manifest: DatasetManifest,
    run_dir: Path,
    base: Path | None = None,
    report_stage: bool = True,
):
    base = base or run_dir
    masks_dir = base / "masks"
    clusters = _load_json(base / "clusters.json")
    if "k" not in clusters:
        raise DataError(f"no clustering summary under {base} (run label first)")
    k = int(clusters["k"])
    merge = _resolve_merge(cfg, manifest)
    n_classes = _num_classes(cfg, manifest)
    preds, gts = [], []
    for image in manifest.images:
        if image.gt_mask is None:
            raise DataError("ground truth required for eval")
        mask_path = masks_dir / f"{image.image_id}_pseudo.png"
        if not mask_path.exists():
            raise DataError(f"pseudo mask not found: {mask_path}")
        pred = read_mask_png(mask_path)
        if pred.shape != (image.height, image.width):
            pred = resize_mask(pred, image.height, image.width)
        gt = read_mask_png(manifest.resolve(image.gt_mask))
        if gt.shape != (image.height, image.width):
            raise DataError(
                f"{image.image_id}: size mismatch after resize policy: GT "
                f"{gt.shape} vs manifest {(image.height, image.width)}")
        preds.append(pred)
        gts.append(gt)
    report = evaluate_dataset(
        preds, gts, num_clusters=k, num_classes=n_classes,
        merge=merge, drop_unlabeled=cfg.drop_unlabeled)
    eval_dir = base / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    save_report(report, eval_dir / "report.json")
    write_per_class_csv(report, eval_dir / "per_class.csv")
    if cfg.svg:
        (eval_dir / "per_class_iou.svg").write_text(svg_iou_chart(report))
    if report_stage:
        _update_report(run_dir, cfg, "eval", {
            "k": k,
            "num_classes": n_classes,
            "miou": report.miou,
            "pixel_accuracy": report.pixel_accuracy,
            "mean_f1": report.mean_f1,
            "ignored_pixels": report.ignored_pixels,
        })
    return report


def stage_sweep(cfg: RunConfig, manifest: DatasetManifest, run_dir: Path) -> None:
    if not cfg.k_list:
        raise ConfigError("sweep requires --k-list or --k-min/--k-max")
    sweep_dir = run_dir / "sweep"
    sweep_dir.mkdir(exist_ok=True)
    rows = []
    for k in cfg.k_list:
        base = sweep_dir / f"K{k:03d}"
        stage_label(cfg, manifest, run_dir, k=k, out_prefix=base)
        report = stage_eval(cfg, manifest, run_dir, base=base, report_stage=False)
        rows.append((k, report.miou, report.pixel_accuracy, report.mean_f1,
                     report.ignored_pixels))
    with open(sweep_dir / "summary.csv", "w") as fh:
        fh.write("k,miou,pixel_accuracy,mean_f1,ignored_pixels\n")
        for k, miou, pacc, mf1, ign in rows:
            fh.write(f"{k},{miou:.10f},{pacc:.10f},{mf1:.10f},{ign}\n")
    best = max(rows, key=lambda r: (r[1], -r[0]))
    _update_report(run_dir, cfg, "sweep", {
        "k_values": list(cfg.k_list),
        "best_miou": best[1],
        "best_k_by_miou": best[0],
    })


def stage_export_denoise(cfg: RunConfig, manifest: DatasetManifest, run_dir: Path) -> None:
    masks_dir = run_dir / "masks"
    clusters = _load_json(run_dir / "clusters.json")
    k = cfg.k if cfg.k is not None else clusters.get("k")
    if k is None:
        raise ConfigError("k is required for export-denoise (or run label first)")
    mask_paths = {
        image.image_id: masks_dir / f"{image.image_id}_pseudo.png"
        for image in manifest.images
    }
    for image_id, path in mask_paths.items():
        if not path.exists():
            raise DataError(f"pseudo mask not found: {path}")
    denoise_dir = run_dir / "denoise"
    denoise_dir.mkdir(exist_ok=True)
    kept, dropped = export_training_set(
        manifest, mask_paths, cfg.theta, int(k),
        denoise_dir / "denoise_manifest.json")
    _update_report(run_dir, cfg, "export_denoise", {
        "kept": kept, "dropped": dropped, "theta": cfg.theta,
    })


# ---------------------------------------------------------------------------
# command wiring


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="dataset manifest JSON")
    p.add_argument("--out", help="output root; artifacts land in <out>/<run-id>/")
    p.add_argument("--run-id", dest="run_id", help="run directory name")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--jobs", type=int, dest="jobs")


def _add_segment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=int, dest="tau",
                   help="validity threshold: valid means patch count > tau")
    p.add_argument("--weighted-edges", action="store_const", const=True,
                   dest="weighted_edges", help="keep raw affinities as edge weights")


def _add_label_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--crop-features", dest="crop_features",
                   help=f"crop feature DTF file or {MEAN_PATCH!r}")
    p.add_argument("--k", type=int, dest="k", help="number of pseudo-classes")
    p.add_argument("--l2-normalize", action="store_const", const=True,
                   dest="l2_normalize")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--merge-table", dest="merge_table",
                   help='JSON label-merge table (raw GT id -> coarse class), '
                        'or a bundled table name such as "suim"')
    p.add_argument("--no-drop-unlabeled", action="store_const", const=False,
                   dest="drop_unlabeled")
    p.add_argument("--svg", action="store_const", const=True, dest="svg",
                   help="emit an SVG bar chart of per-class IoU")


def _parse_k_list(args: argparse.Namespace) -> list[int] | None:
    if getattr(args, "k_values", None):
        return [int(x) for x in args.k_values.split(",")]
    k_min, k_max = getattr(args, "k_min", None), getattr(args, "k_max", None)
    if (k_min is None) != (k_max is None):
        raise ConfigError("--k-min and --k-max must be given together")
    if k_min is not None:
        if k_max < k_min:
            raise ConfigError("--k-max must be >= --k-min")
        return list(range(k_min, k_max + 1))
    return None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchseg",
        description="Distill and evaluate pseudo-annotated segmentation masks "
                    "from patch features.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="affinity graph + modularity partitioning")
    _add_common(p)
    _add_segment_flags(p)

    p = sub.add_parser("label", help="k-means pseudo-labels + mask synthesis")
    _add_common(p)
    _add_label_flags(p)
    _add_eval_flags(p)

    p = sub.add_parser("mask", help="re-synthesize masks from labeled segments")
    _add_common(p)

    p = sub.add_parser("eval", help="Hungarian-matched metrics against GT")
    _add_common(p)
    _add_eval_flags(p)

    p = sub.add_parser("pipeline", help="segment + label + eval")
    _add_common(p)
    _add_segment_flags(p)
    _add_label_flags(p)
    _add_eval_flags(p)

    p = sub.add_parser("sweep", help="label + eval for a range of K")
    _add_common(p)
    _add_segment_flags(p)
    _add_label_flags(p)
    _add_eval_flags(p)
    p.add_argument("--k-list", dest="k_values", help="comma-separated K values")
    p.add_argument("--k-min", type=int, dest="k_min")
    p.add_argument("--k-max", type=int, dest="k_max")

    p = sub.add_parser("export-denoise", help="training-set export for de-noising")
    _add_common(p)
    p.add_argument("--theta", type=float, dest="theta",
                   help="drop masks whose top class covers >= theta of labeled pixels")
    p.add_argument("--k", type=int, dest="k")

    p = sub.add_parser("retrieve", help="k-nearest-neighbor rows of a feature file")
    p.add_argument("--features", required=True, help="DTF feature file")
    p.add_argument("--query-row", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", help="write JSON here instead of stdout")
    return parser


def _timed(run_dir: Path, stage_name: str, fn, *args):
    start = time.perf_counter()
    result = fn(*args)
    _record_timing(run_dir, stage_name, time.perf_counter() - start)
    return result


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "retrieve":
        feats = read_tensor(args.features)
        if feats.ndim != 2:
            raise DataError(f"features must be 2-D, got {feats.shape}")
        neighbors = retrieve_neighbors(feats, args.query_row, args.k)
        payload = json.dumps(
            [{"row": r, "distance": d} for r, d in neighbors], indent=2) + "\n"
        if args.out:
            Path(args.out).write_text(payload)
        else:
            sys.stdout.write(payload)
        return 0

    cfg = _build_config(args)
    if args.command == "sweep":
        cfg.k_list = _parse_k_list(args) or cfg.k_list
    manifest = load_manifest(cfg.manifest)
    run_dir = _run_dir(cfg)
    _save_json(cfg.portable_dict(), run_dir / "config.json")

    if args.command == "segment":
        _timed(run_dir, "segment", stage_segment, cfg, manifest, run_dir)
    elif args.command == "label":
        _timed(run_dir, "label", stage_label, cfg, manifest, run_dir)
    elif args.command == "mask":
        _timed(run_dir, "mask", stage_mask, cfg, manifest, run_dir)
    elif args.command == "eval":
        report = _timed(run_dir, "eval", stage_eval, cfg, manifest, run_dir)
        print(f"MIoU {report.miou:.4f}  PAcc {report.pixel_accuracy:.4f}  "
              f"meanF1 {report.mean_f1:.4f}")
    elif args.command == "pipeline":
        _timed(run_dir, "segment", stage_segment, cfg, manifest, run_dir)
        _timed(run_dir, "label", stage_label, cfg, manifest, run_dir)
        report = _timed(run_dir, "eval", stage_eval, cfg, manifest, run_dir)
        print(f"MIoU {report.miou:.4f}  PAcc {report.pixel_accuracy:.4f}  "
              f"meanF1 {report.mean_f1:.4f}")
    elif args.command == "sweep":
        if not (run_dir / "crops.json").exists():
            _timed(run_dir, "segment", stage_segment, cfg, manifest, run_dir)
        _timed(run_dir, "sweep", stage_sweep, cfg, manifest, run_dir)
    elif args.command == "export-denoise":
        _timed(run_dir, "export_denoise", stage_export_denoise, cfg, manifest, run_dir)
    else:  # pragma: no cover
        raise ConfigError(f"unknown command {args.command!r}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except PatchsegError as exc:  # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
