import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from patchseg.cli import main
from patchseg.maskgen import read_mask_png, write_mask_png
from patchseg.synthetic import class_centers, generate_blob_dataset
from patchseg.tensorio import (
    DatasetManifest,
    ManifestImage,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)

N_CLASSES = 3


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifest = generate_blob_dataset(
        root, n_images=6, grid=(12, 12), patch_side=8,
        n_classes=N_CLASSES, seed=11, scale_factor=1)
    return manifest


def run(*argv):
    return main([str(a) for a in argv])


def artifact_bytes(run_dir: Path) -> dict[str, bytes]:
    """All artifact files keyed by relative path; timings are wall-clock
    diagnostics and excluded from determinism comparisons."""
    return {
        str(p.relative_to(run_dir)): p.read_bytes()
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name != "timings.json"
    }


def test_segment_stage(dataset, tmp_path):
    out = tmp_path / "out"
    assert run("segment", "--manifest", dataset, "--out", out, "--run-id", "r1") == 0
    run_dir = out / "r1"
    assert (run_dir / "crops.json").exists()
    segs = sorted((run_dir / "segments").glob("*.segments.json"))
    assert len(segs) == 6
    report = json.loads((run_dir / "run_report.json").read_text())
    stage = report["stages"]["segment"]
    assert stage["total_segments"] >= stage["valid_segments"] > 0
    assert 0 < stage["valid_segment_pct"] <= 100
    assert report["config_hash"]
    assert report["seed"] == 0


def test_pipeline_recovers_blobs(dataset, tmp_path):
    out = tmp_path / "out"
    assert run("pipeline", "--manifest", dataset, "--out", out, "--run-id", "p",
               "--crop-features", "mean-patch", "--k", N_CLASSES) == 0
    report = json.loads((out / "p" / "eval" / "report.json").read_text())
    assert report["pixel_accuracy"] > 0.9
    assert report["miou"] > 0.85
    assert (out / "p" / "eval" / "per_class.csv").exists()
    masks = sorted((out / "p" / "masks").glob("*_pseudo.png"))
    assert len(masks) == 6
    assert masks[0].name.endswith("_pseudo.png")


def test_k_defaults_to_gt_class_count(dataset, tmp_path):
    out = tmp_path / "out"
    assert run("pipeline", "--manifest", dataset, "--out", out, "--run-id", "kc",
               "--crop-features", "mean-patch") == 0
    clusters = json.loads((out / "kc" / "clusters.json").read_text())
    assert clusters["k"] == N_CLASSES


def test_rerun_byte_identical(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("pipeline", "--manifest", dataset, "--out", out,
                   "--run-id", "same", "--crop-features", "mean-patch",
                   "--k", N_CLASSES, "--seed", 3) == 0
    assert artifact_bytes(a / "same") == artifact_bytes(b / "same")


def test_k1_all_labeled_pixels_class_zero(dataset, tmp_path):
    # label with K=1 is legal; evaluation would need K >= C
    out = tmp_path / "out"
    assert run("segment", "--manifest", dataset, "--out", out, "--run-id", "k1") == 0
    assert run("label", "--manifest", dataset, "--out", out, "--run-id", "k1",
               "--crop-features", "mean-patch", "--k", 1) == 0
    for mask_path in (out / "k1" / "masks").glob("*_pseudo.png"):
        mask = read_mask_png(mask_path)
        labeled = mask[mask != 255]
        assert (labeled == 0).all()


def test_crop_permutation_identical_masks(dataset, tmp_path):
    out = tmp_path / "out"
    assert run("segment", "--manifest", dataset, "--out", out, "--run-id", "perm") == 0
    run_dir = out / "perm"

    assert run("label", "--manifest", dataset, "--out", out, "--run-id", "perm",
               "--crop-features", "mean-patch", "--k", N_CLASSES) == 0
    baseline = {p.name: p.read_bytes() for p in (run_dir / "masks").iterdir()}

    # permute the crops manifest rows; the engine must canonicalize
    crops_doc = json.loads((run_dir / "crops.json").read_text())
    rng = np.random.default_rng(0)
    order = rng.permutation(len(crops_doc["crops"]))
    crops_doc["crops"] = [crops_doc["crops"][i] for i in order]
    for row, entry in enumerate(crops_doc["crops"]):
        entry["row"] = row
    (run_dir / "crops.json").write_text(json.dumps(crops_doc))

    assert run("label", "--manifest", dataset, "--out", out, "--run-id", "perm",
               "--crop-features", "mean-patch", "--k", N_CLASSES) == 0
    permuted = {p.name: p.read_bytes() for p in (run_dir / "masks").iterdir()}
    assert permuted == baseline


def test_sweep_reports_and_single_run_consistency(dataset, tmp_path):
    out = tmp_path / "out"
    assert run("pipeline", "--manifest", dataset, "--out", out, "--run-id", "single",
               "--crop-features", "mean-patch", "--k", N_CLASSES, "--seed", 7) == 0
    assert run("sweep", "--manifest", dataset, "--out", out, "--run-id", "sw",
               "--crop-features", "mean-patch", "--seed", 7,
               "--k-min", N_CLASSES, "--k-max", 3 * N_CLASSES) == 0
    sweep_dir = out / "sw" / "sweep"
    ks = list(range(N_CLASSES, 3 * N_CLASSES + 1))
    for k in ks:
        assert (sweep_dir / f"K{k:03d}" / "eval" / "report.json").exists()
    summary = (sweep_dir / "summary.csv").read_text().strip().splitlines()
    assert len(summary) == len(ks) + 1

    single = json.loads((out / "single" / "eval" / "report.json").read_text())
    at_c = json.loads(
        (sweep_dir / f"K{N_CLASSES:03d}" / "eval" / "report.json").read_text())
    assert at_c == single  # sweep at K=C matches the single-run path exactly


def test_two_blob_fixture_two_valid_segments(tmp_path):
    # left half class A, right half class B, no noise: exactly two
    # communities, each one connected block well above tau
    root = tmp_path / "blob2"
    root.mkdir()
    grid = 6
    labels = np.zeros((grid, grid), dtype=int)
    labels[:, grid // 2:] = 1
    centers = class_centers(2)
    feats = centers[labels.reshape(-1)].astype(np.float32)
    write_tensor(feats, root / "f.dtf")
    manifest = DatasetManifest(images=[ManifestImage(
        image_id="two", source="two.png", height=48, width=48,
        resized_side=48, patch_side=8, grid_rows=grid, grid_cols=grid,
        features="f.dtf")], base_dir=root)
    save_manifest(manifest, root / "m.json")
    out = tmp_path / "out"
    assert run("segment", "--manifest", root / "m.json", "--out", out,
               "--run-id", "b", "--tau", "5") == 0
    doc = json.loads((out / "b" / "segments" / "two.segments.json").read_text())
    assert len(doc["segments"]) == 2
    assert all(s["valid"] for s in doc["segments"])


def test_run_report_contents(dataset, tmp_path):
    out = tmp_path / "out"
    assert run("pipeline", "--manifest", dataset, "--out", out, "--run-id", "rr",
               "--crop-features", "mean-patch", "--k", N_CLASSES) == 0
    run_dir = out / "rr"
    report = json.loads((run_dir / "run_report.json").read_text())
    assert report["tool_version"]
    assert len(report["config_hash"]) == 64
    assert "total_segments" in report["stages"]["segment"]
    assert "valid_segment_pct" in report["stages"]["segment"]
    timings = json.loads((run_dir / "timings.json").read_text())
    assert set(timings) == {"segment", "label", "eval"}
    assert all(t >= 0 for t in timings.values())


def test_all_negative_affinity_all_noisy(tmp_path):
    # 2x2 grid, four simplex-vertex features: every off-diagonal dot < 0
    root = tmp_path / "neg"
    root.mkdir()
    feats = class_centers(4).astype(np.float32)
    write_tensor(feats, root / "f.dtf")
    manifest = DatasetManifest(images=[ManifestImage(
        image_id="neg", source="neg.png", height=16, width=16,
        resized_side=16, patch_side=8, grid_rows=2, grid_cols=2,
        features="f.dtf")], base_dir=root)
    save_manifest(manifest, root / "m.json")
    out = tmp_path / "out"
    assert run("segment", "--manifest", root / "m.json", "--out", out,
               "--run-id", "neg", "--tau", 5) == 0
    doc = json.loads((out / "neg" / "segments" / "neg.segments.json").read_text())
    assert len(doc["segments"]) == 4
    assert all(not s["valid"] for s in doc["segments"])
    crops = json.loads((out / "neg" / "crops.json").read_text())
    assert crops["crops"] == []


def test_eval_with_permuted_gt_masks(dataset, tmp_path):
    manifest = load_manifest(dataset)
    out = tmp_path / "out"
    run_dir = out / "pg"
    (run_dir / "masks").mkdir(parents=True)
    perm = np.array([2, 0, 1], dtype=np.uint8)
    for image in manifest.images:
        gt = read_mask_png(manifest.resolve(image.gt_mask))
        write_mask_png(perm[gt], run_dir / "masks" / f"{image.image_id}_pseudo.png")
    (run_dir / "clusters.json").write_text(json.dumps({"k": N_CLASSES}))
    assert run("eval", "--manifest", dataset, "--out", out, "--run-id", "pg",
               "--svg") == 0
    report = json.loads((run_dir / "eval" / "report.json").read_text())
    assert report["miou"] == 1.0
    assert report["pixel_accuracy"] == 1.0
    assert report["mean_f1"] == 1.0
    assert (run_dir / "eval" / "per_class_iou.svg").exists()


def test_mask_resynthesis_identical(dataset, tmp_path):
    out = tmp_path / "out"
    assert run("pipeline", "--manifest", dataset, "--out", out, "--run-id", "ms",
               "--crop-features", "mean-patch", "--k", N_CLASSES) == 0
    masks_dir = out / "ms" / "masks"
    before = {p.name: p.read_bytes() for p in masks_dir.iterdir()}
    for p in masks_dir.iterdir():
        p.unlink()
    assert run("mask", "--manifest", dataset, "--out", out, "--run-id", "ms") == 0
    after = {p.name: p.read_bytes() for p in masks_dir.iterdir()}
    assert after == before


def test_weighted_edges_flag(dataset, tmp_path):
    out = tmp_path / "out"
    assert run("pipeline", "--manifest", dataset, "--out", out, "--run-id", "we",
               "--crop-features", "mean-patch", "--k", N_CLASSES,
               "--weighted-edges") == 0
    report = json.loads((out / "we" / "eval" / "report.json").read_text())
    # blob separation is unambiguous, so weighting must not hurt recovery
    assert report["pixel_accuracy"] > 0.9
    resolved = json.loads((out / "we" / "config.json").read_text())
    assert resolved["weighted_edges"] is True


def test_bundled_suim_merge_table(tmp_path):
    # raw 8-class GT, predictions equal to the merged 6-class labels
    root = tmp_path / "suim"
    manifest_path = generate_blob_dataset(root, n_images=2, grid=(8, 8),
                                          patch_side=4, n_classes=3, seed=6)
    manifest = load_manifest(manifest_path)
    lut = np.array([0, 1, 0, 2, 3, 4, 5, 0], dtype=np.uint8)
    rng = np.random.default_rng(0)
    out = tmp_path / "out"
    run_dir = out / "sm"
    (run_dir / "masks").mkdir(parents=True)
    for image in manifest.images:
        raw = rng.integers(0, 8, size=(image.height, image.width)).astype(np.uint8)
        write_mask_png(raw, manifest.resolve(image.gt_mask))
        write_mask_png(lut[raw], run_dir / "masks" / f"{image.image_id}_pseudo.png")
    (run_dir / "clusters.json").write_text(json.dumps({"k": 6}))
    assert run("eval", "--manifest", manifest_path, "--out", out,
               "--run-id", "sm", "--merge-table", "suim") == 0
    report = json.loads((run_dir / "eval" / "report.json").read_text())
    assert report["num_classes"] == 6
    assert report["pixel_accuracy"] == 1.0
    assert report["miou"] == 1.0


def test_export_denoise(dataset, tmp_path):
    out = tmp_path / "out"
    assert run("pipeline", "--manifest", dataset, "--out", out, "--run-id", "d",
               "--crop-features", "mean-patch", "--k", N_CLASSES) == 0
    assert run("export-denoise", "--manifest", dataset, "--out", out,
               "--run-id", "d", "--theta", "0.95") == 0
    doc = json.loads((out / "d" / "denoise" / "denoise_manifest.json").read_text())
    assert doc["num_classes"] == N_CLASSES
    assert doc["ignore_index"] == 255
    assert len(doc["pairs"]) >= 1


def test_retrieve_command(tmp_path, capsys):
    feats = np.array([[0.0, 0.0], [3.0, 4.0], [0.1, 0.0]], dtype=np.float32)
    path = tmp_path / "f.dtf"
    write_tensor(feats, path)
    assert run("retrieve", "--features", path, "--query-row", 0, "--k", 2) == 0
    got = json.loads(capsys.readouterr().out)
    assert [g["row"] for g in got] == [2, 1]
    assert got[0]["distance"] == pytest.approx(0.1)
    assert got[1]["distance"] == pytest.approx(5.0)


def test_missing_crop_feature_file_named(dataset, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("segment", "--manifest", dataset, "--out", out, "--run-id", "m") == 0
    code = run("label", "--manifest", dataset, "--out", out, "--run-id", "m",
               "--crop-features", tmp_path / "nope.dtf", "--k", N_CLASSES)
    assert code == 3
    assert "nope.dtf" in capsys.readouterr().err


def test_missing_gt_is_data_error(tmp_path, capsys):
    root = tmp_path / "nogt"
    manifest_path = generate_blob_dataset(root, n_images=2, grid=(8, 8),
                                          patch_side=4, n_classes=3, seed=2)
    doc = json.loads(manifest_path.read_text())
    for entry in doc["images"]:
        entry.pop("gt_mask")
    manifest_path.write_text(json.dumps(doc))
    out = tmp_path / "out"
    code = run("pipeline", "--manifest", manifest_path, "--out", out,
               "--run-id", "x", "--crop-features", "mean-patch", "--k", 3)
    assert code == 3
    assert "ground truth required" in capsys.readouterr().err


def test_config_errors_exit_2(dataset, tmp_path, capsys):
    assert run("segment", "--manifest", tmp_path / "missing.json",
               "--out", tmp_path) == 2
    bad_cfg = tmp_path / "cfg.json"
    bad_cfg.write_text(json.dumps({"not_a_key": 1}))
    assert run("segment", "--manifest", dataset, "--out", tmp_path,
               "--config", bad_cfg) == 2
    assert run("pipeline", "--manifest", dataset, "--out", tmp_path,
               "--crop-features", "mean-patch", "--k", 300) == 2
    capsys.readouterr()


def test_config_file_with_flag_override(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "out": str(tmp_path / "from_file"),
        "tau": 2,
        "k": N_CLASSES,
        "crop_features": "mean-patch",
        "run_id": "cfg",
    }))
    # flag overrides the config file's out
    out = tmp_path / "flag_out"
    assert run("pipeline", "--manifest", dataset, "--config", cfg,
               "--out", out) == 0
    assert (out / "cfg" / "eval" / "report.json").exists()
    assert not (tmp_path / "from_file").exists()
    resolved = json.loads((out / "cfg" / "config.json").read_text())
    assert resolved["tau"] == 2


def test_console_entry_point(dataset, tmp_path):
    out = tmp_path / "out"
    proc = subprocess.run(
        [sys.executable, "-m", "patchseg.cli", "pipeline",
         "--manifest", str(dataset), "--out", str(out), "--run-id", "sp",
         "--crop-features", "mean-patch", "--k", str(N_CLASSES)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "MIoU" in proc.stdout


def test_tensors_in_run_are_readable(dataset, tmp_path):
    # features referenced by the manifest stay valid DTF files
    manifest = load_manifest(dataset)
    for image in manifest.images:
        feats = read_tensor(manifest.resolve(image.features))
        assert feats.shape[0] == image.num_patches
