"""Masked cross-entropy, dominant-mask dropping, and training-set export.

This is the measurable half of the de-noising step: the loss an external
segmentation trainer must reproduce (unlabeled pixels contribute nothing),
the rule that drops near-uniform masks from its training set, and the
manifest that hands the kept image/mask pairs over to that trainer.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from .errors import DataError
from .maskgen import UNLABELED
from .tensorio import DatasetManifest

EPS = 1e-12


def validate_prob_map(pred: np.ndarray, atol: float = 1e-6) -> None:
    """Check a (K, H, W) array is a per-pixel probability simplex."""
    if pred.ndim != 3:
        raise ValueError(f"probability map must be (K, H, W), got {pred.shape}")
    if (pred < 0).any():
        raise ValueError("negative probability")
    sums = pred.sum(axis=0)
    if not np.allclose(sums, 1.0, atol=atol, rtol=0):
        worst = float(np.abs(sums - 1.0).max())
        raise ValueError(f"pixel probabilities do not sum to 1 (max error {worst:.2e})")


def masked_cross_entropy(
    pred: np.ndarray,
    pseudo_gt: np.ndarray,
) -> tuple[float, int]:
    """Sum of -ln(p_true + eps) over labeled pixels of the pseudo mask.

    Pixels labeled UNLABELED contribute nothing. Returns (loss, number of
    labeled pixels); warns when there is no supervision at all.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(pseudo_gt)
    validate_prob_map(pred)
    k = pred.shape[0]
    if gt.shape != pred.shape[1:]:
        raise ValueError(f"shape mismatch: pred {pred.shape[1:]} vs mask {gt.shape}")
    labeled = gt != UNLABELED
    if gt[labeled].size and int(gt[labeled].max()) >= k:
        raise ValueError(f"mask label {int(gt[labeled].max())} >= K={k}")
    count = int(labeled.sum())
    if count == 0:
        warnings.warn("no supervision: every pixel is unlabeled", stacklevel=2)
        return 0.0, 0
    yy, xx = np.nonzero(labeled)
    p_true = pred[gt[labeled].astype(np.int64), yy, xx]
    loss = float(-np.log(p_true + EPS).sum())
    return loss, count


def drop_dominant(mask: np.ndarray, theta: float) -> bool:
    """Keep decision for a pseudo mask: dropped when the most frequent
    class covers at least ``theta`` of the labeled pixels (or when nothing
    is labeled). Returns True to keep."""
    if not 0.5 < theta <= 1.0:
        raise ValueError(f"theta must be in (0.5, 1], got {theta}")
    mask = np.asarray(mask)
    labels = mask[mask != UNLABELED]
    if labels.size == 0:
        return False
    top = int(np.bincount(labels.reshape(-1)).max())
    return top / labels.size < theta


def export_training_set(
    manifest: DatasetManifest,
    mask_paths: dict[str, Path],
    theta: float,
    num_classes: int,
    out_path: str | Path,
) -> tuple[int, int]:
    """Write the de-noise training manifest for the kept image/mask pairs.

    ``mask_paths`` maps image_id -> synthesized pseudo-mask path; every
    manifest image must have one. Returns (kept, dropped).
    """
    from .maskgen import read_mask_png

    if not manifest.images:
        raise DataError("nothing to export: empty dataset")
    pairs = []
    dropped = 0
    for image in manifest.images:
        if image.image_id not in mask_paths:
            raise DataError(f"no synthesized mask for image {image.image_id!r}")
        mask_path = mask_paths[image.image_id]
        mask = read_mask_png(mask_path)
        if drop_dominant(mask, theta):
            pairs.append({
                "image": str(manifest.resolve(image.source)),
                "mask": str(mask_path),
            })
        else:
            dropped += 1
    if not pairs:
        raise DataError("nothing to export: every mask was dropped")
    doc = {
        "pairs": pairs,
        "num_classes": num_classes,
        "ignore_index": UNLABELED,
        "theta": theta,
    }
    Path(out_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return len(pairs), dropped
