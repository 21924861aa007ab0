"""Segment crops, deterministic k-means pseudo-labeling, and retrieval.

Every valid segment becomes a crop spec: the tight pixel rectangle around
its patches plus a patch-resolution mask selecting the segment inside that
rectangle (a feature extractor blacks out the unselected pixels). Crop
features come back as a row-aligned tensor; k-means over those rows gives
each valid segment a pseudo-class id. Noisy segments stay unlabeled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .graphseg import Segment, SegmentSet
from .tensorio import DatasetManifest, load_patch_features

KMEANS_MAX_ITER = 300


@dataclass
class CropRecord:
    """Crop spec for one valid segment.

    ``bbox`` is (y0, x0, y1, x1) in resized-image pixels, half-open;
    ``patch_mask`` is the segment's footprint inside the bbox at patch
    resolution (uint8, at least one set cell).
    """

    image_id: str
    segment_id: int
    bbox: tuple[int, int, int, int]
    patch_mask: np.ndarray
    crop_feature_row: int | None = None


def make_crop_specs(segments: SegmentSet, t: int) -> list[CropRecord]:
    """One CropRecord per valid segment, in segment-id order.

    Noisy segments are skipped so they cannot influence clustering.
    """
    h_p, w_p = segments.grid
    records: list[CropRecord] = []
    for seg in segments.segments:
        if not seg.valid:
            continue
        patches = np.asarray(seg.patches, dtype=np.int64)
        rows, cols = patches // w_p, patches % w_p
        r0, r1 = int(rows.min()), int(rows.max())
        c0, c1 = int(cols.min()), int(cols.max())
        mask = np.zeros((r1 - r0 + 1, c1 - c0 + 1), dtype=np.uint8)
        mask[rows - r0, cols - c0] = 1
        records.append(CropRecord(
            image_id=segments.image_id,
            segment_id=seg.segment_id,
            bbox=(t * r0, t * c0, t * (r1 + 1), t * (c1 + 1)),
            patch_mask=mask,
        ))
    return records


def crop_patch_indices(record: CropRecord, t: int, w_p: int) -> np.ndarray:
    """Recover the flat patch indices of a crop's segment from its spec."""
    y0, x0 = record.bbox[0], record.bbox[1]
    r0, c0 = y0 // t, x0 // t
    rr, cc = np.nonzero(record.patch_mask)
    return (r0 + rr) * w_p + (c0 + cc)


def save_crops_manifest(records: list[CropRecord], t: int, path: str | Path) -> None:
    doc = {
        "patch_side": t,
        "crops": [
            {
                "row": i,
                "image_id": r.image_id,
                "segment_id": r.segment_id,
                "bbox": list(r.bbox),
                "patch_mask": r.patch_mask.astype(int).tolist(),
            }
            for i, r in enumerate(records)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_crops_manifest(path: str | Path) -> tuple[list[CropRecord], int]:
    """Read a crops manifest; returns (records, patch_side). Row order is
    the crop-feature row order."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"crops manifest is not valid JSON: {exc}") from exc
    try:
        t = int(doc["patch_side"])
        records = []
        for i, c in enumerate(doc["crops"]):
            mask = np.asarray(c["patch_mask"], dtype=np.uint8)
            if mask.ndim != 2 or not mask.any():
                raise DataError(f"crop {i}: empty or malformed patch_mask")
            records.append(CropRecord(
                image_id=str(c["image_id"]),
                segment_id=int(c["segment_id"]),
                bbox=tuple(int(x) for x in c["bbox"]),
                patch_mask=mask,
                crop_feature_row=int(c["row"]),
            ))
    except (KeyError, TypeError, IndexError) as exc:
        raise DataError(f"malformed crops manifest {path}: {exc}") from exc
    rows = sorted(r.crop_feature_row for r in records)
    if rows != list(range(len(records))):
        raise DataError(
            f"crops manifest rows must be a permutation of 0..{len(records) - 1}")
    return records, t


def mean_patch_crop_features(
    manifest: DatasetManifest,
    records: list[CropRecord],
) -> np.ndarray:
    """Stand-in crop features: mean of each segment's patch feature rows.

    Lets the pipeline run end-to-end from patch features alone, without an
    external extractor producing per-crop features from pixels.
    """
    if not records:
        raise DataError("no valid segments: crops manifest is empty")
    by_id = {im.image_id: im for im in manifest.images}
    cache: dict[str, np.ndarray] = {}
    rows = []
    for rec in records:
        if rec.image_id not in by_id:
            raise DataError(f"crop references unknown image {rec.image_id!r}")
        image = by_id[rec.image_id]
        if rec.image_id not in cache:
            cache[rec.image_id] = load_patch_features(manifest, image)
        feats = cache[rec.image_id]
        idx = crop_patch_indices(rec, image.patch_side, image.grid_cols)
        rows.append(feats[idx].mean(axis=0))
    return np.stack(rows).astype(np.float32)


@dataclass
class ClusterModel:
    """Converged k-means state: centroids, per-row assignment, inertia."""

    n_clusters: int
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kpp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with the supplied PRNG; deterministic given seed."""
    m = points.shape[0]
    chosen = [int(rng.integers(m))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # all remaining mass on already-chosen points: lowest unused index
            idx = next(i for i in range(m) if i not in chosen)
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, m - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def kmeans(features: np.ndarray, k: int, seed: int) -> ClusterModel:
    """Lloyd's algorithm with k-means++ init, fully deterministic per seed.

    Iterates until the assignment is unchanged or 300 iterations. Ties go
    to the lowest cluster id. An emptied cluster is reseeded to the point
    farthest from its own assigned centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    m = x.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if m < k:
        raise ValueError(f"cannot form {k} clusters from {m} points")
    rng = np.random.default_rng(seed)
    centroids = _kpp_init(x, k, rng)
    prev_assign: np.ndarray | None = None
    history: list[float] = []
    assign = np.zeros(m, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = _sq_distances(x, centroids)
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            own = np.sum((x - centroids[assign]) ** 2, axis=1)
            far = int(np.argmax(own))
            centroids[empty] = x[far]
            assign[far] = empty
            counts = np.bincount(assign, minlength=k)
        history.append(float(np.sum((x - centroids[assign]) ** 2)))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        for c in range(k):
            centroids[c] = x[assign == c].mean(axis=0)
    return ClusterModel(
        n_clusters=k,
        centroids=centroids,
        assignment=assign,
        inertia=history[-1],
        inertia_history=history,
    )


def assign_segment_labels(
    segments: SegmentSet,
    crops: list[CropRecord],
    model: ClusterModel,
) -> SegmentSet:
    """Return a copy of ``segments`` with cluster ids on valid segments.

    Noisy segments keep ``label=None`` (rendered as the UNLABELED sentinel
    downstream).
    """
    row_of = {
        (r.image_id, r.segment_id): r.crop_feature_row
        for r in crops
        if r.image_id == segments.image_id
    }
    labeled = []
    for seg in segments.segments:
        label = None
        if seg.valid:
            row = row_of.get((segments.image_id, seg.segment_id))
            if row is None:
                raise DataError(
                    f"{segments.image_id}: no crop feature for valid segment "
                    f"{seg.segment_id}")
            label = int(model.assignment[row])
        labeled.append(Segment(
            segment_id=seg.segment_id,
            patches=list(seg.patches),
            patch_count=seg.patch_count,
            valid=seg.valid,
            label=label,
        ))
    return SegmentSet(image_id=segments.image_id, grid=segments.grid, segments=labeled)


def retrieve_neighbors(
    features: np.ndarray,
    query_row: int,
    k: int,
) -> list[tuple[int, float]]:
    """k nearest rows to ``query_row`` by Euclidean distance, excluding the
    query itself; ascending distance, ties by lower row index."""
    x = np.asarray(features, dtype=np.float64)
    m = x.shape[0]
    if not 0 <= query_row < m:
        raise ValueError(f"query row {query_row} out of range")
    if not 1 <= k <= m - 1:
        raise ValueError(f"k={k} out of range for {m} rows")
    dist = np.sqrt(np.sum((x - x[query_row]) ** 2, axis=1))
    order = [i for i in np.lexsort((np.arange(m), dist)) if i != query_row]
    return [(int(i), float(dist[i])) for i in order[:k]]
