"""Optional de-noising trainer: fits a segmentation model on the exported
image/pseudo-mask pairs and writes fully labeled predicted masks.

The loss is cross-entropy with ignore_index 255, matching the engine's
masked objective: unlabeled pixels contribute nothing.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torchvision.models.segmentation import deeplabv3_mobilenet_v3_large

from .vit import IMAGENET_MEAN, IMAGENET_STD


def _load_pair(image_path: str, mask_path: str, side: int):
    with Image.open(image_path) as img:
        img = img.convert("RGB").resize((side, side), Image.Resampling.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    with Image.open(mask_path) as m:
        mask = m.resize((side, side), Image.Resampling.NEAREST)
        target = np.asarray(mask, dtype=np.int64)
    x = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)
    return x, torch.from_numpy(target)


def train_denoiser(
    denoise_manifest: str | Path,
    out_dir: str | Path,
    epochs: int = 2,
    side: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    device: str = "cpu",
) -> dict:
    """Train from scratch on the manifest pairs, then predict a de-noised
    mask per pair into ``out_dir``. Returns a summary dict."""
    manifest = json.loads(Path(denoise_manifest).read_text())
    pairs = manifest["pairs"]
    if not pairs:
        raise ValueError("denoise manifest has no pairs")
    num_classes = int(manifest["num_classes"])
    ignore = int(manifest.get("ignore_index", 255))

    torch.manual_seed(seed)
    model = deeplabv3_mobilenet_v3_large(
        weights=None, weights_backbone=None, num_classes=num_classes,
        aux_loss=False).to(device)

    data = [_load_pair(p["image"], p["mask"], side) for p in pairs]
    xs = torch.stack([x for x, _ in data])
    targets = torch.stack([t for _, t in data])
    if len(data) == 1:
        # batch-norm in the ASPP pooling branch needs batch size >= 2
        xs, targets = xs.repeat(2, 1, 1, 1), targets.repeat(2, 1, 1)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    last_loss = float("nan")
    batch = 4
    for _ in range(epochs):
        for start in range(0, len(xs), batch):
            end = min(start + batch, len(xs))
            if end - start < 2:
                start = max(0, end - 2)
            optimizer.zero_grad()
            logits = model(xs[start:end].to(device))["out"]
            loss = F.cross_entropy(logits, targets[start:end].to(device),
                                   ignore_index=ignore)
            loss.backward()
            optimizer.step()
            last_loss = float(loss.detach())

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_dir / "denoiser.pth")
    model.eval()
    written = []
    with torch.no_grad():
        for pair, (x, _) in zip(pairs, data):
            logits = model(x[None].to(device))["out"]
            pred = logits.argmax(dim=1)[0].cpu().numpy().astype(np.uint8)
            name = Path(pair["mask"]).stem.replace("_pseudo", "") + "_denoised.png"
            Image.fromarray(pred, mode="L").save(out_dir / name, format="PNG")
            written.append(name)
    return {
        "num_classes": num_classes,
        "pairs": len(pairs),
        "epochs": epochs,
        "final_loss": last_loss,
        "predictions": written,
    }
