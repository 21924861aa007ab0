"""Crop feature extraction against the engine's crops manifests."""

import json

import numpy as np
import pytest
from PIL import Image

from patchseg.cli import main as engine_main
from patchseg.tensorio import read_tensor
from vitfeat.extract import build_dataset, extract_crop_features, preprocess
from vitfeat.vit import ExtractorSpec, load_model

TEST_SPEC = dict(arch="vit-test/8", resize=48, embed_dim=32, depth=2, num_heads=4)


@pytest.fixture(scope="module")
def model():
    return load_model(ExtractorSpec(**TEST_SPEC), seed=0)


@pytest.fixture(scope="module")
def pipeline_env(tmp_path_factory, model):
    """Extractor-produced dataset plus the engine's segment-stage outputs."""
    root = tmp_path_factory.mktemp("env")
    img_dir = root / "imgs"
    img_dir.mkdir()
    rng = np.random.default_rng(1)
    for i in range(3):
        arr = np.zeros((48, 48, 3), np.uint8)
        arr[:, :] = rng.integers(0, 80, 3)
        arr[8:32, 8:32] = rng.integers(150, 255, 3)
        Image.fromarray(arr).save(img_dir / f"im{i}.png")
    spec = ExtractorSpec(**TEST_SPEC)
    manifest = build_dataset(sorted(img_dir.iterdir()), root / "ds", spec, model)
    code = engine_main([
        "segment", "--manifest", str(manifest), "--out", str(root / "run"),
        "--run-id", "r", "--tau", "3"])
    assert code == 0
    crops_path = root / "run" / "r" / "crops.json"
    return root, manifest, crops_path


def test_rows_match_crop_records_in_order(pipeline_env, tmp_path, model):
    root, manifest, crops_path = pipeline_env
    spec = ExtractorSpec(**TEST_SPEC)
    out = tmp_path / "cf.dtf"
    n = extract_crop_features(manifest, crops_path, spec, model, out)
    records = json.loads(crops_path.read_text())["crops"]
    assert n == len(records) >= 2
    feats = read_tensor(out)  # round-trips through the engine reader
    assert feats.shape == (n, 32)


def test_label_stage_consumes_crop_features(pipeline_env, tmp_path, model):
    root, manifest, crops_path = pipeline_env
    spec = ExtractorSpec(**TEST_SPEC)
    out = root / "cf.dtf"
    extract_crop_features(manifest, crops_path, spec, model, out)
    code = engine_main([
        "label", "--manifest", str(manifest), "--out", str(root / "run"),
        "--run-id", "r", "--crop-features", str(out), "--k", "2"])
    assert code == 0
    masks = sorted((root / "run" / "r" / "masks").glob("*_pseudo.png"))
    assert len(masks) == 3


def test_full_image_crop_equals_whole_image_cls(tmp_path, model):
    spec = ExtractorSpec(**TEST_SPEC)
    rng = np.random.default_rng(2)
    img_path = tmp_path / "whole.png"
    Image.fromarray(rng.integers(0, 255, (48, 48, 3)).astype(np.uint8)).save(img_path)
    (tmp_path / "ds").mkdir()
    manifest = build_dataset([img_path], tmp_path / "ds", spec, model)

    grid = 48 // 8
    crops_doc = {
        "patch_side": 8,
        "crops": [{
            "row": 0, "image_id": "whole", "segment_id": 0,
            "bbox": [0, 0, 48, 48],
            "patch_mask": np.ones((grid, grid), int).tolist(),
        }],
    }
    crops_path = tmp_path / "crops.json"
    crops_path.write_text(json.dumps(crops_doc))
    out = tmp_path / "cf.dtf"
    extract_crop_features(manifest, crops_path, spec, model, out)
    crop_cls = read_tensor(out)[0]

    with Image.open(img_path) as img:
        x = preprocess(img, spec.resize, spec.device)
    whole_cls = model.cls_feature(x)[0].numpy()
    assert crop_cls.tobytes() == whole_cls.astype(np.float32).tobytes()


def test_empty_crops_manifest_rejected(pipeline_env, tmp_path, model):
    _, manifest, _ = pipeline_env
    spec = ExtractorSpec(**TEST_SPEC)
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"patch_side": 8, "crops": []}))
    with pytest.raises(ValueError, match="no valid segments"):
        extract_crop_features(manifest, empty, spec, model, tmp_path / "o.dtf")


def test_bbox_outside_image_rejected(pipeline_env, tmp_path, model):
    _, manifest, _ = pipeline_env
    spec = ExtractorSpec(**TEST_SPEC)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({
        "patch_side": 8,
        "crops": [{"row": 0, "image_id": "im0", "segment_id": 0,
                   "bbox": [0, 0, 64, 64],
                   "patch_mask": np.ones((8, 8), int).tolist()}],
    }))
    with pytest.raises(ValueError, match="outside image"):
        extract_crop_features(manifest, bad, spec, model, tmp_path / "o.dtf")


def test_masked_pixels_change_feature(pipeline_env, tmp_path, model):
    # blacking out half the crop must change the CLS embedding
    _, manifest, _ = pipeline_env
    spec = ExtractorSpec(**TEST_SPEC)
    grid = 48 // 8
    full = np.ones((grid, grid), int)
    half = full.copy()
    half[:, grid // 2:] = 0
    out_a, out_b = tmp_path / "a.dtf", tmp_path / "b.dtf"
    for mask, out in ((full, out_a), (half, out_b)):
        doc = {"patch_side": 8, "crops": [{
            "row": 0, "image_id": "im0", "segment_id": 0,
            "bbox": [0, 0, 48, 48], "patch_mask": mask.tolist()}]}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        extract_crop_features(manifest, path, spec, model, out)
    assert not np.array_equal(read_tensor(out_a), read_tensor(out_b))
