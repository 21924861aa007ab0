"""Extractor CLI: patches, crops, train-denoiser."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .extract import build_dataset, extract_crop_features
from .vit import ExtractorSpec, load_model

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def _spec_from(args: argparse.Namespace) -> ExtractorSpec:
    return ExtractorSpec(
        arch=args.arch,
        resize=args.resize,
        device=args.device,
        embed_dim=args.embed_dim,
        depth=args.depth,
        num_heads=args.num_heads,
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", default="vit-small/16",
                   help='model "<family>/<patch>", e.g. vit-small/16, vit-base/8')
    p.add_argument("--resize", type=int, default=224, help="input side T")
    p.add_argument("--checkpoint", help="local pre-trained state dict (.pth)")
    p.add_argument("--device", default="cpu")
    p.add_argument("--seed", type=int, default=0,
                   help="weight init seed when no checkpoint is given")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--depth", type=int, dest="depth")
    p.add_argument("--num-heads", type=int, dest="num_heads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitfeat",
        description="Emit ViT patch key features and crop CLS features as "
                    "DTF1 interchange files.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("patches", help="patch features + dataset manifest")
    p.add_argument("--images", required=True,
                   help="image directory (or a single image file)")
    p.add_argument("--out", required=True)
    p.add_argument("--gt-dir", dest="gt_dir",
                   help="directory of <image-stem>.png ground-truth masks")
    _add_model_flags(p)

    p = sub.add_parser("crops", help="crop CLS features for a crops manifest")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--crops", required=True, help="crops manifest JSON")
    p.add_argument("--out", required=True, help="output DTF file")
    _add_model_flags(p)

    p = sub.add_parser("train-denoiser", help="optional: fit the de-noising "
                       "segmentation model on exported pairs")
    p.add_argument("--denoise-manifest", required=True, dest="denoise_manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--size", type=int, default=64, help="training resolution")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--device", default="cpu")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "patches":
            images_arg = Path(args.images)
            if images_arg.is_dir():
                paths = sorted(
                    p for p in images_arg.iterdir()
                    if p.suffix.lower() in _IMAGE_SUFFIXES)
            else:
                paths = [images_arg]
            if not paths:
                raise ValueError(f"no images found under {images_arg}")
            spec = _spec_from(args)
            model = load_model(spec, args.checkpoint, seed=args.seed)
            manifest = build_dataset(paths, args.out, spec, model,
                                     gt_dir=args.gt_dir)
            print(f"wrote {len(paths)} feature files, manifest {manifest}")
        elif args.command == "crops":
            spec = _spec_from(args)
            model = load_model(spec, args.checkpoint, seed=args.seed)
            n = extract_crop_features(
                args.manifest, args.crops, spec, model, args.out)
            print(f"wrote {n} crop feature rows to {args.out}")
        elif args.command == "train-denoiser":
            from .denoiser import train_denoiser

            summary = train_denoiser(
                args.denoise_manifest, args.out, epochs=args.epochs,
                side=args.size, lr=args.lr, seed=args.seed, device=args.device)
            print(json.dumps(summary, indent=2))
        return 0
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
