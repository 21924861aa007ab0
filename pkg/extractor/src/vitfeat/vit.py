"""Compact vision transformer with per-head key extraction.

The module layout (patch_embed.proj, cls_token, pos_embed,
blocks.N.attn.qkv, ...) matches the reference self-supervised ViT
checkpoints, so locally available pre-trained weights load directly via
``load_state_dict``. Without a checkpoint the model runs with seeded
random weights, which still exercises the full interchange contract.

Patch key features are taken from the final attention block: the block
input is layer-normed, projected through qkv, and the per-head key vectors
are concatenated along the embedding dimension (CLS row dropped).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# embed_dim, depth, num_heads per family/size
_PRESETS = {
    "vit-tiny": (192, 12, 3),
    "vit-small": (384, 12, 6),
    "vit-base": (768, 12, 12),
}


@dataclass
class ExtractorSpec:
    """Model family/size/patch plus the resize side and device.

    ``arch`` is "<family>/<patch>", e.g. "vit-small/16" or "vit-base/8";
    explicit embed_dim/depth/num_heads override the preset (used for
    desk-scale test models).
    """

    arch: str = "vit-small/16"
    resize: int = 224
    device: str = "cpu"
    embed_dim: int | None = None
    depth: int | None = None
    num_heads: int | None = None

    @property
    def patch_size(self) -> int:
        return int(self.arch.rsplit("/", 1)[1])

    def dims(self) -> tuple[int, int, int]:
        family = self.arch.rsplit("/", 1)[0]
        preset = _PRESETS.get(family)
        if preset is None and None in (self.embed_dim, self.depth, self.num_heads):
            raise ValueError(f"unknown arch {self.arch!r} and no explicit dims")
        embed, depth, heads = preset if preset else (0, 0, 0)
        return (
            self.embed_dim or embed,
            self.depth or depth,
            self.num_heads or heads,
        )

    def validate(self) -> None:
        if self.resize % self.patch_size != 0:
            raise ValueError(
                f"resize side {self.resize} not divisible by patch size "
                f"{self.patch_size}")


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = (
            self.qkv(x)
            .reshape(b, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)

    def keys(self, x: torch.Tensor) -> torch.Tensor:
        """Per-head key vectors concatenated over heads: (B, N, dim)."""
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, c)
        return qkv[:, :, 1]


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, dim * 4)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, embed_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)  # (B, N, dim)


class VisionTransformer(nn.Module):
    def __init__(self, spec: ExtractorSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        embed_dim, depth, num_heads = spec.dims()
        if embed_dim % num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        torch.manual_seed(seed)
        self.patch_size = spec.patch_size
        self.embed_dim = embed_dim
        self.patch_embed = PatchEmbed(spec.patch_size, embed_dim)
        num_patches = (spec.resize // spec.patch_size) ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(Block(embed_dim, num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim)
        self.eval()

    def _interpolated_pos(self, n_patches: int, w: int, h: int) -> torch.Tensor:
        n_ref = self.pos_embed.shape[1] - 1
        if n_patches == n_ref and w == h:
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:]
        side = int(math.sqrt(n_ref))
        wp, hp = w // self.patch_size, h // self.patch_size
        patch_pos = nn.functional.interpolate(
            patch_pos.reshape(1, side, side, self.embed_dim).permute(0, 3, 1, 2),
            size=(hp, wp), mode="bicubic", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, hp * wp, self.embed_dim)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def prepare_tokens(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        x = self.patch_embed(x)
        cls = self.cls_token.expand(b, -1, -1)
        x = torch.cat([cls, x], dim=1)
        return x + self._interpolated_pos(x.shape[1] - 1, w, h)

    @torch.no_grad()
    def cls_feature(self, x: torch.Tensor) -> torch.Tensor:
        """(B, dim) CLS embedding after the full encoder."""
        x = self.prepare_tokens(x)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)[:, 0]

    @torch.no_grad()
    def patch_keys(self, x: torch.Tensor) -> torch.Tensor:
        """(B, N, dim) key features from the final attention block."""
        x = self.prepare_tokens(x)
        for block in self.blocks[:-1]:
            x = block(x)
        keys = self.blocks[-1].attn.keys(self.blocks[-1].norm1(x))
        return keys[:, 1:]  # drop the CLS row


def load_model(
    spec: ExtractorSpec,
    checkpoint: str | None = None,
    seed: int = 0,
) -> VisionTransformer:
    model = VisionTransformer(spec, seed=seed)
    if checkpoint:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        state = {k.removeprefix("module."): v for k, v in state.items()}
        missing, unexpected = model.load_state_dict(state, strict=False)
        missing = [k for k in missing if not k.startswith("head")]
        if missing:
            raise ValueError(f"checkpoint missing keys: {missing[:5]}...")
    return model.to(spec.device)
