"""DTF1 tensor files and dataset manifests.

DTF1 is a minimal binary container for dense float32 tensors, fixed to
little-endian so files are byte-identical across platforms:

    bytes 0..3   magic "DTF1"
    byte  4      dtype code (1 = float32)
    byte  5      ndim
    next 8*ndim  dims, u64 little-endian
    rest         row-major float32 payload, little-endian

Feature tensors are plain numpy float32 arrays in memory; files are
validated for finiteness and non-zero dimensions on both read and write.

A dataset manifest is a JSON document listing, per image, the source path,
original size, resize side, patch side, patch-grid shape and the patch
feature file, plus an optional ground-truth mask path and an optional
label-merge table (raw ground-truth id -> coarse class id). Relative paths
are resolved against the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"DTF1"
DTYPE_F32 = 1


def _check_finite(data: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(data.reshape(-1)))
    if bad.size:
        raise DataError(f"non-finite value at index {int(bad[0])}")


def write_tensor(tensor: np.ndarray, path: str | Path) -> None:
    """Write a dense float32 tensor to ``path`` in the DTF1 format."""
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    if arr.ndim == 0:
        raise DataError("tensor must have at least one dimension")
    if any(d == 0 for d in arr.shape):
        raise DataError(f"zero-sized dimension in shape {arr.shape}")
    if arr.ndim > 255:
        raise DataError("too many dimensions for DTF1")
    _check_finite(arr)
    header = MAGIC + bytes([DTYPE_F32, arr.ndim])
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a DTF1 file back into a float32 array (exact inverse of write)."""
    raw = Path(path).read_bytes()
    if len(raw) < 6:
        raise DataError("truncated header")
    if raw[:4] != MAGIC:
        raise DataError("bad magic")
    dtype_code, ndim = raw[4], raw[5]
    if dtype_code != DTYPE_F32:
        raise DataError(f"unsupported dtype code {dtype_code}")
    dims_end = 6 + 8 * ndim
    if len(raw) < dims_end:
        raise DataError("truncated header")
    shape = struct.unpack(f"<{ndim}Q", raw[6:dims_end])
    if any(d == 0 for d in shape):
        raise DataError(f"zero-sized dimension in shape {shape}")
    count = 1
    for d in shape:
        count *= d
    payload = raw[dims_end:]
    if len(payload) < 4 * count:
        raise DataError(f"truncated payload: expected {count} elements")
    if len(payload) > 4 * count:
        raise DataError("trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    _check_finite(arr)
    return arr


@dataclass
class ManifestImage:
    image_id: str
    source: str
    height: int
    width: int
    resized_side: int
    patch_side: int
    grid_rows: int
    grid_cols: int
    features: str
    gt_mask: str | None = None

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class DatasetManifest:
    images: list[ManifestImage] = field(default_factory=list)
    label_merge: dict[int, int] | None = None
    base_dir: Path = Path(".")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p


_REQUIRED_IMAGE_KEYS = (
    "image_id",
    "source",
    "height",
    "width",
    "resized_side",
    "patch_side",
    "grid_rows",
    "grid_cols",
    "features",
)


def _parse_image(entry: dict) -> ManifestImage:
    missing = [k for k in _REQUIRED_IMAGE_KEYS if k not in entry]
    if missing:
        raise DataError(f"manifest image missing keys: {missing}")
    img = ManifestImage(
        image_id=str(entry["image_id"]),
        source=str(entry["source"]),
        height=int(entry["height"]),
        width=int(entry["width"]),
        resized_side=int(entry["resized_side"]),
        patch_side=int(entry["patch_side"]),
        grid_rows=int(entry["grid_rows"]),
        grid_cols=int(entry["grid_cols"]),
        features=str(entry["features"]),
        gt_mask=str(entry["gt_mask"]) if entry.get("gt_mask") else None,
    )
    if img.height < 1 or img.width < 1 or img.resized_side < 1 or img.patch_side < 1:
        raise DataError(f"{img.image_id}: non-positive dimension")
    if img.resized_side % img.patch_side != 0:
        raise DataError(f"{img.image_id}: T not divisible by t "
                        f"({img.resized_side} % {img.patch_side})")
    per_side = img.resized_side // img.patch_side
    if img.grid_rows != per_side or img.grid_cols != per_side:
        raise DataError(f"{img.image_id}: inconsistent grid "
                        f"({img.grid_rows}x{img.grid_cols}, expected {per_side}x{per_side})")
    return img


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a dataset manifest. Unknown keys are ignored."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise DataError('manifest must be an object with an "images" list')
    images = [_parse_image(e) for e in doc["images"]]
    seen: set[str] = set()
    for img in images:
        if img.image_id in seen:
            raise DataError(f"duplicate image_id {img.image_id!r}")
        seen.add(img.image_id)
    merge = None
    if doc.get("label_merge") is not None:
        raw = doc["label_merge"]
        if not isinstance(raw, dict):
            raise DataError('"label_merge" must be an object')
        merge = {int(k): int(v) for k, v in raw.items()}
    return DatasetManifest(images=images, label_merge=merge, base_dir=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc: dict = {
        "images": [
            {k: v for k, v in {
                "image_id": im.image_id,
                "source": im.source,
                "height": im.height,
                "width": im.width,
                "resized_side": im.resized_side,
                "patch_side": im.patch_side,
                "grid_rows": im.grid_rows,
                "grid_cols": im.grid_cols,
                "features": im.features,
                "gt_mask": im.gt_mask,
            }.items() if v is not None}
            for im in manifest.images
        ],
    }
    if manifest.label_merge is not None:
        doc["label_merge"] = {str(k): v for k, v in manifest.label_merge.items()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_patch_features(manifest: DatasetManifest, image: ManifestImage) -> np.ndarray:
    """Read an image's patch feature file and check it against the grid."""
    feats = read_tensor(manifest.resolve(image.features))
    if feats.ndim != 2:
        raise DataError(f"{image.image_id}: patch features must be 2-D, got {feats.shape}")
    if feats.shape[0] != image.num_patches:
        raise DataError(
            f"{image.image_id}: feature rows {feats.shape[0]} != grid "
            f"{image.grid_rows}x{image.grid_cols}")
    return feats
