"""Unsupervised segmentation evaluation.

Predicted cluster ids carry no semantics, so K clusters are first mapped
to the C ground-truth classes (K >= C) by maximizing total intersection
pixel counts with the Hungarian algorithm. Pixels landing in the K - C
unmatched clusters count as false negatives of their ground-truth class
and are never true positives. Unlabeled predicted pixels (the 255
sentinel) can be dropped from scoring, which is the protocol for initial
masks before de-noising.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .maskgen import UNLABELED

_TIE_TOL = 1e-9


@dataclass
class ConfusionMatrix:
    """Pixel tallies: rows = merged GT classes, cols = predicted clusters."""

    counts: np.ndarray
    ignored_pixels: int = 0

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def num_clusters(self) -> int:
        return self.counts.shape[1]


@dataclass
class EvalReport:
    num_classes: int
    num_clusters: int
    class_to_cluster: list[int]
    cluster_to_class: list[int | None]
    iou: list[float]
    f1: list[float]
    miou: float
    pixel_accuracy: float
    mean_f1: float
    ignored_pixels: int
    confusion: np.ndarray


def _km_min_square(cost: list[list[float]]) -> list[int]:
    """Kuhn-Munkres on a square cost matrix (minimization); returns the
    column assigned to each row. O(n^3) potentials formulation."""
    n = len(cost)
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row matched to column j, 1-based
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = -1
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    cols = [0] * n
    for j in range(1, n + 1):
        if match[j]:
            cols[match[j] - 1] = j - 1
    return cols


def _solve_max(score: np.ndarray) -> tuple[float, list[int]]:
    """Best injective row -> column assignment maximizing the total score,
    via Kuhn-Munkres on the negated, zero-padded square matrix."""
    rows, cols = score.shape
    if rows == 0:
        return 0.0, []
    square = np.zeros((cols, cols), dtype=np.float64)
    square[:rows] = -score
    chosen = _km_min_square(square.tolist())[:rows]
    total = float(sum(score[i, chosen[i]] for i in range(rows)))
    return total, [int(c) for c in chosen]


def hungarian_max(score: np.ndarray) -> list[int]:
    """Injective class -> cluster assignment maximizing the summed score.

    Requires K >= C. Among equally scoring assignments, returns the
    lexicographically smallest (resolved by re-solving subproblems, which
    only happens when ties actually exist).
    """
    s = np.asarray(score, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"score must be 2-D, got shape {s.shape}")
    n_classes, n_clusters = s.shape
    if n_classes < 1:
        raise ValueError("need at least one class")
    if n_clusters < n_classes:
        raise ValueError(
            f"need at least as many clusters as classes (C={n_classes}, K={n_clusters})")
    best_total, completion = _solve_max(s)
    tol = _TIE_TOL * max(1.0, abs(best_total))
    remaining = list(range(n_clusters))
    assignment: list[int] = []
    fixed = 0.0
    for c in range(n_classes):
        default_k = completion[0]
        accepted = None
        for k in remaining:
            if k >= default_k:
                break
            rest = [x for x in remaining if x != k]
            sub_total, sub_cols = _solve_max(s[np.ix_(range(c + 1, n_classes), rest)])
            if fixed + s[c, k] + sub_total >= best_total - tol:
                accepted = k
                completion = [k] + [rest[j] for j in sub_cols]
                break
        if accepted is None:
            accepted = default_k
        assignment.append(accepted)
        fixed += float(s[c, accepted])
        remaining.remove(accepted)
        completion = completion[1:]
    return assignment


def _merge_lut(merge: dict[int, int]) -> np.ndarray:
    lut = np.full(256, -1, dtype=np.int64)
    for raw, coarse in merge.items():
        if not 0 <= raw <= 255:
            raise DataError(f"merge table raw id {raw} outside uint8 range")
        lut[raw] = coarse
    return lut


def accumulate_confusion(
    pred: np.ndarray,
    gt: np.ndarray,
    merge: dict[int, int] | None = None,
    drop_unlabeled: bool = True,
    num_classes: int | None = None,
    num_clusters: int | None = None,
) -> ConfusionMatrix:
    """Per-pixel tally of (merged GT class, predicted cluster).

    Pixels predicted UNLABELED are counted in ``ignored_pixels`` when
    ``drop_unlabeled``; otherwise their presence is an error (a de-noised
    mask must not contain the sentinel).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: pred {pred.shape} vs gt {gt.shape}")
    gt_flat = gt.reshape(-1).astype(np.int64)
    pred_flat = pred.reshape(-1).astype(np.int64)
    if merge is not None:
        merged = _merge_lut(merge)[gt_flat]
        if (merged < 0).any():
            bad = int(gt_flat[np.argmax(merged < 0)])
            raise DataError(f"GT label {bad} outside merge table")
        gt_flat = merged
    unlabeled = pred_flat == UNLABELED
    ignored = int(unlabeled.sum())
    if ignored and not drop_unlabeled:
        raise ValueError("unlabeled predicted pixels present but drop_unlabeled is off")
    keep = ~unlabeled
    gt_kept, pred_kept = gt_flat[keep], pred_flat[keep]
    n_cls = num_classes if num_classes is not None else int(gt_flat.max()) + 1
    n_clu = num_clusters if num_clusters is not None else (
        int(pred_kept.max()) + 1 if pred_kept.size else 1)
    if gt_kept.size and (int(gt_kept.max()) >= n_cls or int(gt_kept.min()) < 0):
        raise DataError(f"GT label outside [0, {n_cls})")
    if pred_kept.size and int(pred_kept.max()) >= n_clu:
        raise DataError(f"predicted cluster outside [0, {n_clu})")
    counts = np.bincount(
        gt_kept * n_clu + pred_kept, minlength=n_cls * n_clu
    ).reshape(n_cls, n_clu)
    return ConfusionMatrix(counts=counts.astype(np.int64), ignored_pixels=ignored)


def score(cm: ConfusionMatrix, mapping: list[int]) -> EvalReport:
    """Metrics from a confusion matrix and an injective class -> cluster
    mapping.

    TP_c = counts[c][sigma(c)]; FP_c sums the matched column's other rows;
    FN_c sums the class row outside the matched column, which makes pixels
    of unmatched clusters false negatives of their GT class. IoU and F1 are
    per class; MIoU and mean F1 average over all C classes; pixel accuracy
    is total TP over all counted pixels. Empty classes (no pixels in the
    row or the matched column) score 0.
    """
    counts = cm.counts
    n_cls, n_clu = counts.shape
    if len(mapping) != n_cls:
        raise ValueError("mapping must assign every class")
    if len(set(mapping)) != n_cls or any(not 0 <= k < n_clu for k in mapping):
        raise ValueError("mapping must be injective into the cluster range")
    sigma = np.asarray(mapping, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise ValueError("no labeled pixels to evaluate")
    tp = counts[np.arange(n_cls), sigma].astype(np.float64)
    col_sums = counts.sum(axis=0).astype(np.float64)
    row_sums = counts.sum(axis=1).astype(np.float64)
    fp = col_sums[sigma] - tp
    fn = row_sums - tp
    denom_iou = tp + fp + fn
    denom_f1 = 2.0 * tp + fp + fn
    iou = np.divide(tp, denom_iou, out=np.zeros(n_cls), where=denom_iou > 0)
    f1 = np.divide(2.0 * tp, denom_f1, out=np.zeros(n_cls), where=denom_f1 > 0)
    cluster_to_class: list[int | None] = [None] * n_clu
    for c, k in enumerate(mapping):
        cluster_to_class[k] = c
    return EvalReport(
        num_classes=n_cls,
        num_clusters=n_clu,
        class_to_cluster=[int(k) for k in mapping],
        cluster_to_class=cluster_to_class,
        iou=[float(x) for x in iou],
        f1=[float(x) for x in f1],
        miou=float(iou.mean()),
        pixel_accuracy=float(tp.sum() / total),
        mean_f1=float(f1.mean()),
        ignored_pixels=cm.ignored_pixels,
        confusion=counts,
    )


def evaluate_dataset(
    preds: list[np.ndarray],
    gts: list[np.ndarray],
    num_clusters: int,
    num_classes: int,
    merge: dict[int, int] | None = None,
    drop_unlabeled: bool = True,
) -> EvalReport:
    """Dataset-level evaluation: one confusion matrix accumulated over all
    images, one Hungarian matching on its intersection counts."""
    if len(preds) != len(gts):
        raise ValueError(f"mismatched lists: {len(preds)} preds vs {len(gts)} gts")
    if not preds:
        raise ValueError("empty dataset")
    counts = np.zeros((num_classes, num_clusters), dtype=np.int64)
    ignored = 0
    for pred, gt in zip(preds, gts):
        cm = accumulate_confusion(
            pred, gt, merge=merge, drop_unlabeled=drop_unlabeled,
            num_classes=num_classes, num_clusters=num_clusters)
        counts += cm.counts
        ignored += cm.ignored_pixels
    cm = ConfusionMatrix(counts=counts, ignored_pixels=ignored)
    mapping = hungarian_max(counts.astype(np.float64))
    return score(cm, mapping)


def report_to_dict(report: EvalReport) -> dict:
    return {
        "num_classes": report.num_classes,
        "num_clusters": report.num_clusters,
        "class_to_cluster": report.class_to_cluster,
        "cluster_to_class": report.cluster_to_class,
        "iou": report.iou,
        "f1": report.f1,
        "miou": report.miou,
        "pixel_accuracy": report.pixel_accuracy,
        "mean_f1": report.mean_f1,
        "ignored_pixels": report.ignored_pixels,
        "confusion": report.confusion.tolist(),
    }


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")


def write_per_class_csv(report: EvalReport, path: str | Path) -> None:
    counts = report.confusion
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "cluster", "tp", "fp", "fn", "iou", "f1"])
        for c, k in enumerate(report.class_to_cluster):
            tp = int(counts[c, k])
            fp = int(counts[:, k].sum()) - tp
            fn = int(counts[c].sum()) - tp
            writer.writerow([c, k, tp, fp, fn,
                             f"{report.iou[c]:.6f}", f"{report.f1[c]:.6f}"])


def svg_iou_chart(report: EvalReport, width: int = 480, height: int = 240) -> str:
    """Minimal hand-rolled SVG bar chart of per-class IoU (deterministic)."""
    n = report.num_classes
    margin = 30
    bar_w = (width - 2 * margin) / max(n, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    for c, val in enumerate(report.iou):
        bh = val * (height - 2 * margin)
        x = margin + c * bar_w
        y = height - margin - bh
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w * 0.8:.1f}" '
            f'height="{bh:.1f}" fill="steelblue"/>')
        parts.append(
            f'<text x="{x + bar_w * 0.4:.1f}" y="{height - margin + 14}" '
            f'font-size="10" text-anchor="middle">{c}</text>')
    parts.append(
        f'<text x="{margin}" y="{margin - 10}" font-size="11">per-class IoU '
        f'(MIoU {report.miou:.4f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
