"""Patch and crop feature extraction into interchange files.

Consumes and produces the engine's external interfaces directly (dataset
manifest JSON, crops manifest JSON, DTF1 tensors); nothing here imports the
engine itself.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dtf import write_f32
from .vit import IMAGENET_MEAN, IMAGENET_STD, ExtractorSpec, VisionTransformer

_CROP_BATCH = 8


def preprocess(img: Image.Image, side: int, device: str) -> torch.Tensor:
    """RGB, bilinear resize to (side, side), ImageNet normalization."""
    img = img.convert("RGB").resize((side, side), Image.Resampling.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)[None].to(device)


def extract_patch_features(
    image_path: str | Path,
    spec: ExtractorSpec,
    model: VisionTransformer,
) -> np.ndarray:
    """(N, d) key features for one image; N = (resize/patch)^2, row-major
    patch grid, d = heads x per-head dim."""
    spec.validate()
    with Image.open(image_path) as img:
        x = preprocess(img, spec.resize, spec.device)
    keys = model.patch_keys(x)[0]
    return keys.cpu().numpy().astype(np.float32)


def build_dataset(
    image_paths: list[Path],
    out_dir: str | Path,
    spec: ExtractorSpec,
    model: VisionTransformer,
    gt_dir: str | Path | None = None,
) -> Path:
    """Extract patch features for every image and write the dataset
    manifest; returns the manifest path. Ground-truth masks are picked up
    from ``gt_dir`` by image stem when present."""
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    grid = spec.resize // spec.patch_size
    entries = []
    for path in image_paths:
        path = Path(path)
        with Image.open(path) as img:
            width, height = img.size
        feats = extract_patch_features(path, spec, model)
        feat_rel = f"features/{path.stem}.dtf"
        write_f32(feats, out_dir / feat_rel)
        entry = {
            "image_id": path.stem,
            "source": str(path.resolve()),
            "height": height,
            "width": width,
            "resized_side": spec.resize,
            "patch_side": spec.patch_size,
            "grid_rows": grid,
            "grid_cols": grid,
            "features": feat_rel,
        }
        if gt_dir is not None:
            gt = Path(gt_dir) / f"{path.stem}.png"
            if gt.exists():
                entry["gt_mask"] = str(gt.resolve())
        entries.append(entry)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps({"images": entries}, indent=2, sort_keys=True) + "\n")
    return manifest_path


def _load_dataset_manifest(path: str | Path) -> dict[str, dict]:
    doc = json.loads(Path(path).read_text())
    base = Path(path).parent
    images = {}
    for entry in doc["images"]:
        src = Path(entry["source"])
        entry = dict(entry)
        entry["source_path"] = src if src.is_absolute() else base / src
        images[entry["image_id"]] = entry
    return images


def _masked_crop(
    resized: np.ndarray,
    bbox: tuple[int, int, int, int],
    patch_mask: np.ndarray,
    patch_side: int,
) -> np.ndarray:
    """Cut the bbox out of the resized image and black out pixels whose
    patch cell is not part of the segment."""
    side = resized.shape[0]
    y0, x0, y1, x1 = bbox
    if not (0 <= y0 < y1 <= side and 0 <= x0 < x1 <= side):
        raise ValueError(
            f"bbox {bbox} outside image of side {side}: crops manifest does "
            f"not match this dataset")
    crop = resized[y0:y1, x0:x1].copy()
    pix_mask = np.repeat(np.repeat(patch_mask, patch_side, 0), patch_side, 1)
    if pix_mask.shape != crop.shape[:2]:
        raise ValueError(
            f"patch mask {patch_mask.shape} inconsistent with bbox {bbox}")
    crop[pix_mask == 0] = 0
    return crop


def extract_crop_features(
    dataset_manifest: str | Path,
    crops_manifest: str | Path,
    spec: ExtractorSpec,
    model: VisionTransformer,
    out_path: str | Path,
) -> int:
    """CLS features for every crop record, one row per record in manifest
    row order, written as a DTF file. Returns the row count."""
    spec.validate()
    images = _load_dataset_manifest(dataset_manifest)
    doc = json.loads(Path(crops_manifest).read_text())
    records = sorted(doc["crops"], key=lambda c: c["row"])
    patch_side = int(doc["patch_side"])
    if not records:
        raise ValueError("no valid segments: crops manifest is empty")

    crops: list[torch.Tensor] = []
    cache: dict[str, np.ndarray] = {}
    for rec in records:
        image_id = rec["image_id"]
        if image_id not in images:
            raise ValueError(f"crop references unknown image {image_id!r}")
        entry = images[image_id]
        if image_id not in cache:
            with Image.open(entry["source_path"]) as img:
                resized = img.convert("RGB").resize(
                    (entry["resized_side"], entry["resized_side"]),
                    Image.Resampling.BILINEAR)
            cache[image_id] = np.asarray(resized, dtype=np.uint8)
        crop = _masked_crop(
            cache[image_id], tuple(rec["bbox"]),
            np.asarray(rec["patch_mask"], dtype=np.uint8), patch_side)
        crops.append(preprocess(
            Image.fromarray(crop), spec.resize, spec.device)[0])

    rows = []
    for start in range(0, len(crops), _CROP_BATCH):
        batch = torch.stack(crops[start:start + _CROP_BATCH])
        rows.append(model.cls_feature(batch).cpu().numpy())
    feats = np.concatenate(rows).astype(np.float32)
    write_f32(feats, out_path)
    return feats.shape[0]
