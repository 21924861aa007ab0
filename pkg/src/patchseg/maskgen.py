"""Pseudo-mask synthesis, nearest-neighbor resizing, and PNG I/O.

Masks are uint8 label images; 255 is reserved as the UNLABELED sentinel
for pixels of noisy segments, which caps the usable class count at 255.
Masks travel as 8-bit single-channel PNGs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .graphseg import SegmentSet

UNLABELED = 255


def synthesize_mask(labeled_segments: SegmentSet, t: int) -> np.ndarray:
    """Paint each pixel with its patch's segment label at resized (T x T)
    resolution; noisy-segment patches become UNLABELED."""
    h_p, w_p = labeled_segments.grid
    patch_labels = np.full(h_p * w_p, UNLABELED, dtype=np.int64)
    for seg in labeled_segments.segments:
        if not seg.valid:
            continue
        if seg.label is None:
            raise ValueError(
                f"valid segment {seg.segment_id} has no label; run labeling first")
        if not 0 <= seg.label < UNLABELED:
            raise ValueError(
                f"segment label {seg.label} collides with the UNLABELED sentinel")
        patch_labels[seg.patches] = seg.label
    grid = patch_labels.reshape(h_p, w_p).astype(np.uint8)
    return np.repeat(np.repeat(grid, t, axis=0), t, axis=1)


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resample to (height, width); label-preserving."""
    if height < 1 or width < 1:
        raise ValueError("target size must be positive")
    src_h, src_w = mask.shape
    rows = (np.arange(height, dtype=np.int64) * src_h) // height
    cols = (np.arange(width, dtype=np.int64) * src_w) // width
    return mask[np.ix_(rows, cols)]


def write_mask_png(mask: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("mask values outside uint8 range")
        arr = arr.astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_mask_png(path: str | Path) -> np.ndarray:
    try:
        img = Image.open(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read PNG {path}: {exc}") from exc
    if img.mode != "L":
        raise DataError(f"expected 8-bit grayscale PNG, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.uint8)
