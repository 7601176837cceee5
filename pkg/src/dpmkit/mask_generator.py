"""Hierarchical mask generator: gated multi-layer patch maps to a prototype channel mask."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import TokenSequence
from .errors import ConfigError, ShapeError


def default_gate(num_layers: int) -> list[int]:
    gate = [0] * num_layers
    gate[max(num_layers // 2, 1) - 1] = 1
    gate[num_layers - 1] = 1
    return gate


@dataclass
class HMGConfig:
    """``layer_gate[l - 1]`` selects the output of block ``l``."""

    layer_gate: list[int] = field(default_factory=lambda: default_gate(4))
    conv_channels: list[int] | None = None
    output_dim: int = 32

    def __post_init__(self):
        self.layer_gate = [int(bool(g)) for g in self.layer_gate]
        if not any(self.layer_gate):
            raise ConfigError("layer_gate must select at least one layer")

    @property
    def selected_layers(self) -> list[int]:
        return [i + 1 for i, g in enumerate(self.layer_gate) if g]


def reshape_layer(tokens: torch.Tensor, grid_shape) -> torch.Tensor:
    """Row-major ``(..., D, c) -> (..., h, w, c)``."""
    h, w = grid_shape
    if h * w != tokens.shape[-2]:
        raise ShapeError(f"grid {h}x{w} does not hold {tokens.shape[-2]} tokens")
    return tokens.reshape(*tokens.shape[:-2], h, w, tokens.shape[-1])


def flatten_grid(grid: torch.Tensor) -> torch.Tensor:
    return grid.reshape(*grid.shape[:-3], grid.shape[-3] * grid.shape[-2], grid.shape[-1])


class HierarchicalMaskGenerator(nn.Module):
    def __init__(self, config: HMGConfig, embed_dim: int, grid_shape):
        super().__init__()
        self.config = config
        self.grid_shape = tuple(grid_shape)
        in_ch = embed_dim * len(config.selected_layers)
        channels = config.conv_channels or [embed_dim, embed_dim]
        layers = []
        for i, out_ch in enumerate(channels):
            if i:
                layers.append(nn.GELU())
            layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=1))
            in_ch = out_ch
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch, config.output_dim)

    def fuse(self, seq: TokenSequence) -> torch.Tensor:
        """Concatenate gated patch maps along channels, ``(B, C, h, w)``."""
        if max(self.config.selected_layers) > seq.num_layers:
            raise ShapeError(f"gate selects layer {max(self.config.selected_layers)} of {seq.num_layers}")
        maps = [reshape_layer(seq.patch_tokens(l), self.grid_shape) for l in self.config.selected_layers]
        return torch.cat(maps, dim=-1).permute(0, 3, 1, 2)

    def pooled(self, seq: TokenSequence) -> torch.Tensor:
        return self.convs(self.fuse(seq)).mean(dim=(2, 3))

    def forward(self, seq: TokenSequence) -> torch.Tensor:
        return torch.sigmoid(self.fc(self.pooled(seq)))


def generate_mask(seq: TokenSequence, generator: HierarchicalMaskGenerator) -> torch.Tensor:
    return generator(seq)
