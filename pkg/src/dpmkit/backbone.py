"""Small vision transformer exposing per-layer tokens and last-block CLS attention."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError


@dataclass
class BackboneConfig:
    image_height: int = 64
    image_width: int = 32
    patch_size: int = 8
    patch_stride: int = 8
    embed_dim: int = 64
    projected_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    num_cameras: int = 2
    camera_coeff: float = 1.0
    mlp_ratio: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.patch_size > self.image_height or self.patch_size > self.image_width:
            raise ConfigError(
                f"patch_size {self.patch_size} exceeds image {self.image_height}x{self.image_width}"
            )
        if self.patch_stride < 1:
            raise ConfigError("patch_stride must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.projected_dim > self.embed_dim:
            raise ConfigError("projected_dim must not exceed embed_dim")
        if self.camera_coeff < 0:
            raise ConfigError("camera_coeff must be >= 0")
        if self.num_layers < 1 or self.num_cameras < 1:
            raise ConfigError("num_layers and num_cameras must be positive")

    @property
    def grid_shape(self) -> tuple[int, int]:
        rows = (self.image_height - self.patch_size) // self.patch_stride + 1
        cols = (self.image_width - self.patch_size) // self.patch_stride + 1
        return rows, cols

    @property
    def num_patches(self) -> int:
        return count_patches(self)


def count_patches(config: BackboneConfig) -> int:
    """Number of patch tokens produced for an image under ``config``."""
    h, w, p, s = config.image_height, config.image_width, config.patch_size, config.patch_stride
    if p > h or p > w:
        raise ConfigError(f"patch_size {p} exceeds image {h}x{w}")
    if s < 1:
        raise ConfigError("patch_stride must be >= 1")
    return ((h - p) // s + 1) * ((w - p) // s + 1)


@dataclass
class TokenSequence:
    """Per-layer token snapshots plus the CLS readouts.

    ``tokens_per_layer[0]`` is the tokenizer output; entry ``l`` is the output
    of block ``l``. Arrays are batched: ``(B, 1 + D, c)``.
    """

    tokens_per_layer: list[torch.Tensor]
    cls_feature: torch.Tensor
    projected_cls: torch.Tensor

    @property
    def num_layers(self) -> int:
        return len(self.tokens_per_layer) - 1

    def patch_tokens(self, layer: int) -> torch.Tensor:
        return self.tokens_per_layer[layer][:, 1:, :]


@dataclass
class AttentionStack:
    """Last-block CLS-to-patch attention, ``(B, N_h, D)``; rows sum to one.

    ``cls_query`` and ``patch_keys`` are the per-head tensors the rows were
    computed from, kept for inspection.
    """

    cls_attention: torch.Tensor
    cls_query: torch.Tensor = field(repr=False)
    patch_keys: torch.Tensor = field(repr=False)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        # Scale is 1/sqrt(c / N_h), i.e. the per-head width.
        scale = 1.0 / math.sqrt(self.head_dim)
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out), q, k


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor):
        h, q, k = self.attn(self.norm1(x))
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, q, k


class VisionBackbone(nn.Module):
    """Pre-norm ViT with camera embedding.

    Images are ``(B, 3, H, W)`` float tensors.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c = config.embed_dim
        d = count_patches(config)
        self.patch_embed = nn.Conv2d(3, c, kernel_size=config.patch_size, stride=config.patch_stride)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + d, c))
        self.cam_embed = nn.Parameter(torch.zeros(config.num_cameras, c))
        self.blocks = nn.ModuleList(
            Block(c, config.num_heads, config.mlp_ratio) for _ in range(config.num_layers)
        )
        self.norm = nn.LayerNorm(c)
        self.head = nn.Linear(c, config.projected_dim)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cam_embed, std=0.02)

    @property
    def num_patches(self) -> int:
        return self.pos_embed.shape[1] - 1

    def tokenize(self, images: torch.Tensor, camera_ids) -> torch.Tensor:
        cfg = self.config
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, cfg.image_height, cfg.image_width):
            raise ShapeError(
                f"expected images (B, 3, {cfg.image_height}, {cfg.image_width}), got {tuple(images.shape)}"
            )
        camera_ids = torch.as_tensor(camera_ids, dtype=torch.long).reshape(-1)
        if camera_ids.numel() != images.shape[0]:
            raise ShapeError("one camera id per image required")
        if camera_ids.numel() and (camera_ids.min() < 0 or camera_ids.max() >= cfg.num_cameras):
            raise IndexError(f"camera id out of range [0, {cfg.num_cameras})")
        patches = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(images.shape[0], -1, -1)
        tokens = torch.cat([cls, patches], dim=1) + self.pos_embed
        return tokens + cfg.camera_coeff * self.cam_embed[camera_ids][:, None, :]

    def forward(self, tokens: torch.Tensor) -> tuple[TokenSequence, AttentionStack]:
        if tokens.dim() == 2:
            tokens = tokens[None]
        if tokens.shape[1:] != (1 + self.num_patches, self.config.embed_dim):
            raise ShapeError(
                f"expected tokens (B, {1 + self.num_patches}, {self.config.embed_dim}), got {tuple(tokens.shape)}"
            )
        if not torch.isfinite(tokens).all():
            raise NumericError("non-finite values in input tokens")
        layers = [tokens]
        x = tokens
        q = k = None
        for block in self.blocks:
            x, q, k = block(x)
            layers.append(x)
        cls_feature = self.norm(x[:, 0])
        cls_query = q[:, :, 0, :]
        patch_keys = k[:, :, 1:, :]
        logits = torch.einsum("bhd,bhnd->bhn", cls_query, patch_keys) / math.sqrt(q.shape[-1])
        attention = AttentionStack(F.softmax(logits, dim=-1), cls_query, patch_keys)
        seq = TokenSequence(layers, cls_feature, self.head(cls_feature))
        return seq, attention

    def encode(self, images: torch.Tensor, camera_ids) -> torch.Tensor:
        seq, _ = self(self.tokenize(images, camera_ids))
        return seq.projected_cls
