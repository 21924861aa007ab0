"""Synthetic blob datasets for end-to-end testing and demos.

Each generated image is a patch grid holding a background plus a few
axis-aligned rectangular blobs, every region carrying a class id. Patch
features are drawn around per-class center vectors chosen with negative
pairwise dot products (vertices of a scaled simplex), so the thresholded
affinity graph is dense within a class and almost empty across classes.
Noise is sigma = 0.05 x the minimum center separation.

The generator writes a complete on-disk dataset: patch-feature DTF files,
ground-truth masks, source images, and the manifest.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .maskgen import write_mask_png
from .tensorio import DatasetManifest, ManifestImage, save_manifest, write_tensor

NOISE_FACTOR = 0.05


def class_centers(n_classes: int) -> np.ndarray:
    """Class center vectors e_i - 1/C: pairwise dot products are -1/C."""
    eye = np.eye(n_classes, dtype=np.float64)
    return eye - 1.0 / n_classes


def _min_separation(centers: np.ndarray) -> float:
    diffs = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diffs**2).sum(axis=2))
    return float(dist[dist > 0].min())


def _place_blobs(
    rng: np.random.Generator,
    grid: tuple[int, int],
    n_classes: int,
    n_blobs: tuple[int, int],
    side_range: tuple[int, int],
) -> np.ndarray:
    """Patch-level class labels: background 0, non-overlapping rectangles
    of random blob classes 1..C-1."""
    h_p, w_p = grid
    labels = np.zeros((h_p, w_p), dtype=np.int64)
    count = int(rng.integers(n_blobs[0], n_blobs[1] + 1))
    placed = 0
    for _ in range(200):
        if placed >= count:
            break
        bh = int(rng.integers(side_range[0], side_range[1] + 1))
        bw = int(rng.integers(side_range[0], side_range[1] + 1))
        if bh > h_p or bw > w_p:
            continue
        r = int(rng.integers(0, h_p - bh + 1))
        c = int(rng.integers(0, w_p - bw + 1))
        if (labels[r:r + bh, c:c + bw] != 0).any():
            continue
        labels[r:r + bh, c:c + bw] = int(rng.integers(1, n_classes))
        placed += 1
    return labels


def generate_blob_dataset(
    out_dir: str | Path,
    n_images: int = 20,
    grid: tuple[int, int] = (16, 16),
    patch_side: int = 8,
    n_classes: int = 4,
    n_blobs: tuple[int, int] = (2, 4),
    blob_side: tuple[int, int] = (3, 6),
    seed: int = 0,
    scale_factor: int = 1,
) -> Path:
    """Write a synthetic dataset under ``out_dir``; returns the manifest path.

    ``scale_factor`` sets the original image size to scale_factor x the
    resized side, exercising the mask-resize path when > 1.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt").mkdir(exist_ok=True)
    (out_dir / "images").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    centers = class_centers(n_classes)
    sigma = NOISE_FACTOR * _min_separation(centers)
    h_p, w_p = grid
    resized = h_p * patch_side
    if w_p != h_p:
        raise ValueError("synthetic grids are square (resize side is a single T)")
    original = resized * scale_factor
    images = []
    for i in range(n_images):
        image_id = f"img{i:03d}"
        labels = _place_blobs(rng, grid, n_classes, n_blobs, blob_side)
        feats = centers[labels.reshape(-1)] + sigma * rng.standard_normal(
            (h_p * w_p, n_classes))
        feat_rel = f"features/{image_id}.dtf"
        write_tensor(feats.astype(np.float32), out_dir / feat_rel)
        rep = original // h_p
        gt = np.repeat(np.repeat(labels.astype(np.uint8), rep, axis=0), rep, axis=1)
        gt_rel = f"gt/{image_id}_gt.png"
        write_mask_png(gt, out_dir / gt_rel)
        # a recognizable source image: class id scaled into gray levels
        src_rel = f"images/{image_id}.png"
        write_mask_png((gt * (250 // max(n_classes - 1, 1))).astype(np.uint8),
                       out_dir / src_rel)
        images.append(ManifestImage(
            image_id=image_id,
            source=src_rel,
            height=original,
            width=original,
            resized_side=resized,
            patch_side=patch_side,
            grid_rows=h_p,
            grid_cols=w_p,
            features=feat_rel,
            gt_mask=gt_rel,
        ))
    manifest = DatasetManifest(images=images, base_dir=out_dir)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
