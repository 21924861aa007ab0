import json
import math

import numpy as np
import pytest

from patchseg.denoise import (
    EPS,
    drop_dominant,
    export_training_set,
    masked_cross_entropy,
    validate_prob_map,
)
from patchseg.errors import DataError
from patchseg.maskgen import UNLABELED, write_mask_png
from patchseg.synthetic import generate_blob_dataset
from patchseg.tensorio import load_manifest


def one_hot(mask, k):
    pred = np.zeros((k,) + mask.shape)
    labeled = mask != UNLABELED
    yy, xx = np.nonzero(labeled)
    pred[mask[labeled].astype(int), yy, xx] = 1.0
    pred[:, ~labeled] = 1.0 / k
    return pred


def test_one_hot_prediction_near_zero_loss():
    mask = np.array([[0, 1], [1, UNLABELED]], dtype=np.uint8)
    loss, count = masked_cross_entropy(one_hot(mask, 2), mask)
    assert count == 3
    assert loss == pytest.approx(0.0, abs=1e-10)


def test_uniform_prediction_closed_form():
    k = 4
    mask = np.full((2, 5), 0, dtype=np.uint8)  # 10 labeled pixels
    pred = np.full((k, 2, 5), 1.0 / k)
    loss, count = masked_cross_entropy(pred, mask)
    assert count == 10
    assert loss == pytest.approx(10 * math.log(4), abs=1e-9)


def test_all_unlabeled_warns():
    mask = np.full((3, 3), UNLABELED, dtype=np.uint8)
    pred = np.full((2, 3, 3), 0.5)
    with pytest.warns(UserWarning, match="no supervision"):
        loss, count = masked_cross_entropy(pred, mask)
    assert (loss, count) == (0.0, 0)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        masked_cross_entropy(np.full((2, 2, 2), 0.5), np.zeros((3, 3), dtype=np.uint8))


def test_additive_over_disjoint_pixel_sets():
    rng = np.random.default_rng(0)
    k = 3
    probs = rng.dirichlet(np.ones(k), size=(4, 4)).transpose(2, 0, 1)
    mask = rng.integers(0, k, size=(4, 4)).astype(np.uint8)
    left, right = mask.copy(), mask.copy()
    left[:, 2:] = UNLABELED
    right[:, :2] = UNLABELED
    full_loss, full_n = masked_cross_entropy(probs, mask)
    l_loss, l_n = masked_cross_entropy(probs, left)
    r_loss, r_n = masked_cross_entropy(probs, right)
    assert full_n == l_n + r_n
    assert full_loss == pytest.approx(l_loss + r_loss, rel=1e-12)


def test_monotone_in_true_probability():
    k = 2
    mask = np.zeros((1, 1), dtype=np.uint8)
    lo, _ = masked_cross_entropy(np.array([[[0.3]], [[0.7]]]), mask)
    hi, _ = masked_cross_entropy(np.array([[[0.8]], [[0.2]]]), mask)
    assert hi < lo


def test_finite_difference_gradient():
    rng = np.random.default_rng(1)
    k, h, w = 3, 2, 2
    probs = rng.dirichlet(np.ones(k), size=(h, w)).transpose(2, 0, 1)
    mask = rng.integers(0, k, size=(h, w)).astype(np.uint8)
    step = 1e-6

    def loss_at(p):
        labeled = mask != UNLABELED
        yy, xx = np.nonzero(labeled)
        return float(-np.log(p[mask[labeled].astype(int), yy, xx] + EPS).sum())

    for c in range(k):
        for y in range(h):
            for x in range(w):
                up, down = probs.copy(), probs.copy()
                up[c, y, x] += step
                down[c, y, x] -= step
                fd = (loss_at(up) - loss_at(down)) / (2 * step)
                if mask[y, x] == c:
                    expected = -1.0 / (probs[c, y, x] + EPS)
                    assert fd == pytest.approx(expected, rel=1e-4)
                else:
                    assert fd == 0.0


def test_prob_map_validation():
    bad = np.full((2, 2, 2), 0.4)
    with pytest.raises(ValueError, match="sum to 1"):
        validate_prob_map(bad)
    with pytest.raises(ValueError, match="negative"):
        validate_prob_map(np.stack([np.full((2, 2), 1.2), np.full((2, 2), -0.2)]))


# --- drop rule -----------------------------------------------------------------


def test_fully_uniform_dropped():
    mask = np.zeros((10, 10), dtype=np.uint8)
    assert drop_dominant(mask, 0.95) is False


def test_balanced_kept():
    mask = np.zeros((10, 10), dtype=np.uint8)
    mask[5:] = 1
    assert drop_dominant(mask, 0.95) is True


def test_boundary_inclusive():
    mask = np.zeros(100, dtype=np.uint8).reshape(10, 10)
    mask.reshape(-1)[:4] = 1  # 96 of 100 pixels are class 0
    assert drop_dominant(mask, 0.95) is False
    mask.reshape(-1)[4] = 1  # 95 of 100
    assert drop_dominant(mask, 0.95) is False
    mask.reshape(-1)[5:7] = 1  # 93 of 100
    assert drop_dominant(mask, 0.95) is True


def test_unlabeled_ignored_in_ratio():
    mask = np.full((10, 10), UNLABELED, dtype=np.uint8)
    mask[0, :5] = 0
    mask[1, :5] = 1
    assert drop_dominant(mask, 0.95) is True


def test_no_labeled_pixels_dropped():
    mask = np.full((4, 4), UNLABELED, dtype=np.uint8)
    assert drop_dominant(mask, 0.95) is False


def test_theta_range_validated():
    mask = np.zeros((2, 2), dtype=np.uint8)
    for theta in (0.5, 0.0, 1.1):
        with pytest.raises(ValueError):
            drop_dominant(mask, theta)


def test_invariant_under_relabeling():
    rng = np.random.default_rng(2)
    mask = rng.integers(0, 4, size=(12, 12)).astype(np.uint8)
    perm = np.array([3, 1, 0, 2], dtype=np.uint8)
    for theta in (0.6, 0.8, 0.95):
        assert drop_dominant(mask, theta) == drop_dominant(perm[mask], theta)


def test_theta_one_drops_only_uniform():
    uniform = np.zeros((4, 4), dtype=np.uint8)
    nearly = uniform.copy()
    nearly[0, 0] = 1
    assert drop_dominant(uniform, 1.0) is False
    assert drop_dominant(nearly, 1.0) is True


# --- export --------------------------------------------------------------------


def _mini_dataset(tmp_path):
    manifest_path = generate_blob_dataset(
        tmp_path / "data", n_images=3, grid=(8, 8), patch_side=4,
        n_classes=3, seed=5)
    return load_manifest(manifest_path)


def test_export_drops_dominant(tmp_path):
    manifest = _mini_dataset(tmp_path)
    masks_dir = tmp_path / "masks"
    masks_dir.mkdir()
    mask_paths = {}
    for i, image in enumerate(manifest.images):
        mask = np.zeros((image.height, image.width), dtype=np.uint8)
        if i != 1:
            mask[: image.height // 2] = 1  # balanced, kept
        path = masks_dir / f"{image.image_id}_pseudo.png"
        write_mask_png(mask, path)
        mask_paths[image.image_id] = path
    out = tmp_path / "denoise.json"
    kept, dropped = export_training_set(manifest, mask_paths, 0.95, 3, out)
    assert (kept, dropped) == (2, 1)
    doc = json.loads(out.read_text())
    assert len(doc["pairs"]) == 2
    assert doc["num_classes"] == 3
    assert doc["ignore_index"] == UNLABELED


def test_export_nothing_errors(tmp_path):
    manifest = _mini_dataset(tmp_path)
    masks_dir = tmp_path / "masks"
    masks_dir.mkdir()
    mask_paths = {}
    for image in manifest.images:
        path = masks_dir / f"{image.image_id}_pseudo.png"
        write_mask_png(np.zeros((image.height, image.width), dtype=np.uint8), path)
        mask_paths[image.image_id] = path
    with pytest.raises(DataError, match="nothing to export"):
        export_training_set(manifest, mask_paths, 0.95, 3, tmp_path / "d.json")


def test_export_missing_mask(tmp_path):
    manifest = _mini_dataset(tmp_path)
    with pytest.raises(DataError, match="no synthesized mask"):
        export_training_set(manifest, {}, 0.95, 3, tmp_path / "d.json")
