"""Saliency-guided patch transfer: saliency prediction, OIoU pairing, token recombination."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import TokenSequence
from .errors import ConfigError, EmptyMaskError, ShapeError


@dataclass
class SPTConfig:
    oiou_threshold: float = 0.3
    roll_threshold: float = 0.1
    roll_stride: int = 1
    top_fraction: float = 0.1
    budget_target: float = 0.3
    # soft saliency is rarely saturated; cutting at the retention target keeps above-average patches
    binarize_threshold: float = 0.3
    synth_prob: float = 0.5

    def __post_init__(self):
        for name in ("oiou_threshold", "roll_threshold", "synth_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        for name in ("budget_target", "binarize_threshold"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ConfigError("top_fraction must lie in (0, 1]")
        if self.roll_stride < 1:
            raise ConfigError("roll_stride must be >= 1")


@dataclass
class SaliencyMask:
    soft: np.ndarray
    grid_shape: tuple[int, int]
    threshold: float = 0.5

    def __post_init__(self):
        self.soft = np.asarray(self.soft, dtype=np.float64).reshape(-1)
        h, w = self.grid_shape
        if h * w != self.soft.size:
            raise ShapeError(f"grid {h}x{w} does not hold {self.soft.size} patches")

    @property
    def binary(self) -> np.ndarray:
        return (self.soft >= self.threshold).astype(np.uint8)

    @property
    def grid(self) -> np.ndarray:
        return self.binary.reshape(self.grid_shape)

    @classmethod
    def from_binary(cls, binary, grid_shape, threshold: float = 0.5) -> "SaliencyMask":
        return cls(np.asarray(binary, dtype=np.float64), tuple(grid_shape), threshold)


@dataclass
class SynthesizedSample:
    tokens: torch.Tensor
    target_identity: int
    candidate_identity: int
    candidate_mask: SaliencyMask
    oiou_score: float
    shift: int = 0


class SaliencyDecision(nn.Module):
    """Decision layer mapping concatenated per-layer patch tokens to a patch score.

    With ``normalize`` each layer's patch tokens are standardized (no affine)
    before concatenation, which keeps the decision logits on a common scale
    across layers.
    """

    def __init__(self, embed_dim: int, num_layers: int, normalize: bool = True):
        super().__init__()
        self.num_layers = num_layers
        self.normalize = normalize
        self.linear = nn.Linear(embed_dim * (num_layers + 1), 1)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, seq: TokenSequence) -> torch.Tensor:
        if len(seq.tokens_per_layer) != self.num_layers + 1:
            raise ShapeError(
                f"expected {self.num_layers + 1} token layers, got {len(seq.tokens_per_layer)}"
            )
        layers = [layer[:, 1:, :] for layer in seq.tokens_per_layer]
        if self.normalize:
            layers = [F.layer_norm(x, x.shape[-1:]) for x in layers]
        feats = torch.cat(layers, dim=-1)
        return torch.sigmoid(self.linear(feats).squeeze(-1))


def predict_saliency(seq: TokenSequence, decision: SaliencyDecision, grid_shape, threshold=0.5):
    """Saliency masks for every sample in ``seq``."""
    with torch.no_grad():
        soft = decision(seq).double().cpu().numpy()
    return [SaliencyMask(row, tuple(grid_shape), threshold) for row in soft]


def filter_tokens(layer0: torch.Tensor, soft) -> torch.Tensor:
    """Scale patch rows by their soft saliency, keeping the CLS row."""
    soft = torch.as_tensor(soft, dtype=layer0.dtype)
    single = layer0.dim() == 2
    if single:
        layer0, soft = layer0[None], soft.reshape(1, -1)
    if soft.shape != layer0.shape[:1] + (layer0.shape[1] - 1,):
        raise ShapeError(f"mask shape {tuple(soft.shape)} does not match {layer0.shape[1] - 1} patches")
    out = torch.cat([layer0[:, :1], soft[..., None] * layer0[:, 1:]], dim=1)
    return out[0] if single else out


def _as_binary(mask) -> np.ndarray:
    if isinstance(mask, SaliencyMask):
        return mask.binary.astype(bool)
    return np.asarray(mask).reshape(-1).astype(bool)


def iou(mask_i, mask_j) -> float:
    a, b = _as_binary(mask_i), _as_binary(mask_j)
    if a.shape != b.shape:
        raise ShapeError("mask lengths differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise EmptyMaskError("IoU undefined for two empty masks")
    return np.count_nonzero(a & b) / union


def oiou(mask_i, mask_j) -> float:
    """Overlap of target ``mask_i`` with candidate ``mask_j`` relative to the candidate area."""
    a, b = _as_binary(mask_i), _as_binary(mask_j)
    if a.shape != b.shape:
        raise ShapeError("mask lengths differ")
    area = np.count_nonzero(b)
    if area == 0:
        raise EmptyMaskError("OIoU undefined for an empty candidate mask")
    return np.count_nonzero(a & b) / area


def roll_shifts(width: int, stride: int) -> list[int]:
    return sorted({(k * stride) % width for k in range(width)})


def max_rolled_oiou(mask_i: SaliencyMask, mask_j: SaliencyMask, roll_stride: int = 1) -> tuple[float, int]:
    """Best OIoU over horizontal cyclic shifts of the target grid.

    Returns ``(score, shift)``; the earliest shift wins ties.
    """
    if tuple(mask_i.grid_shape) != tuple(mask_j.grid_shape):
        raise ShapeError("grid shapes differ")
    cand = mask_j.grid.astype(bool)
    area = np.count_nonzero(cand)
    if area == 0:
        raise EmptyMaskError("OIoU undefined for an empty candidate mask")
    target = mask_i.grid.astype(bool)
    best, best_shift = -1.0, 0
    for shift in roll_shifts(target.shape[1], roll_stride):
        score = np.count_nonzero(np.roll(target, shift, axis=1) & cand) / area
        if score > best:
            best, best_shift = score, shift
    return best, best_shift


def select_candidates(batch_masks, identities, config: SPTConfig):
    """Rank cross-identity (target, candidate) pairs eligible for synthesis.

    Returns ``[(target_index, candidate_index, rolled_score), ...]`` sorted by
    score descending, then indices ascending, truncated to the top fraction.
    """
    identities = list(identities)
    if len(identities) != len(batch_masks):
        raise ShapeError("one identity per mask required")
    survivors = []
    for j, cand in enumerate(batch_masks):
        if not cand.binary.any():
            continue
        for i, target in enumerate(batch_masks):
            if identities[i] == identities[j]:
                continue
            if oiou(target, cand) < config.oiou_threshold:
                continue
            rolled, _ = max_rolled_oiou(target, cand, config.roll_stride)
            if rolled >= config.roll_threshold:
                survivors.append((i, j, rolled))
    survivors.sort(key=lambda t: (-t[2], t[0], t[1]))
    keep = math.ceil(config.top_fraction * len(survivors))
    return survivors[:keep]


def recombine_tokens(target: torch.Tensor, candidate: torch.Tensor, binary) -> torch.Tensor:
    """Candidate-salient patches from the target, the rest from the candidate."""
    if target.shape != candidate.shape:
        raise ShapeError(f"token shapes differ: {tuple(target.shape)} vs {tuple(candidate.shape)}")
    m = torch.as_tensor(np.asarray(binary), dtype=target.dtype).reshape(-1, 1)
    if m.shape[0] != target.shape[0] - 1:
        raise ShapeError(f"mask length {m.shape[0]} does not match {target.shape[0] - 1} patches")
    patches = m * target[1:] + (1 - m) * candidate[1:]
    return torch.cat([target[:1], patches], dim=0)


def recombine(target_layer0, candidate_layer0, candidate_mask: SaliencyMask,
              target_identity=-1, candidate_identity=-1, score=float("nan"), shift=0) -> SynthesizedSample:
    tokens = recombine_tokens(target_layer0, candidate_layer0, candidate_mask.binary)
    return SynthesizedSample(tokens, target_identity, candidate_identity, candidate_mask, score, shift)
