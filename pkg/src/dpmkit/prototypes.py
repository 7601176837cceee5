"""Prototype spaces: frozen coarse matrix, learnable matrix, masked view, and prompt anchoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

TEMPLATE_PREFIX = ("a", "photo", "of", "a")
TEMPLATE_SUFFIX = ("person",)
VOCAB = ("<sot>", "<eot>", "a", "photo", "of", "person")


class PrototypeBank(nn.Module):
    """Coarse (frozen buffer) and learnable prototype matrices, row ``k`` = identity ``k``."""

    def __init__(self, num_identities: int, dim: int, coarse=None):
        super().__init__()
        self.num_identities = num_identities
        self.dim = dim
        self.learnable = nn.Parameter(torch.randn(num_identities, dim) / math.sqrt(dim))
        self.register_buffer("coarse", torch.zeros(num_identities, dim))
        self.has_coarse = False
        if coarse is not None:
            self.set_coarse(coarse)

    def set_coarse(self, coarse: torch.Tensor):
        coarse = torch.as_tensor(coarse)
        if coarse.shape != (self.num_identities, self.dim):
            raise ShapeError(f"coarse matrix must be {self.num_identities}x{self.dim}, got {tuple(coarse.shape)}")
        with torch.no_grad():
            self.coarse.copy_(coarse.to(self.coarse.dtype))
        self.has_coarse = True

    def apply_mask(self, mask: torch.Tensor) -> torch.Tensor:
        return apply_mask(self.learnable, mask)


def apply_mask(prototypes: torch.Tensor, mask) -> torch.Tensor:
    """Channel-mask the prototype rows.

    A ``(c,)`` mask yields ``(K, c)``; a batch ``(B, c)`` yields ``(B, K, c)``.
    """
    mask = torch.as_tensor(mask, dtype=prototypes.dtype)
    if mask.shape[-1] != prototypes.shape[-1]:
        raise ShapeError(f"mask length {mask.shape[-1]} != prototype dim {prototypes.shape[-1]}")
    if mask.dim() == 1:
        return prototypes * mask[None, :]
    return prototypes[None, :, :] * mask[:, None, :]


class ToyTextEncoder(nn.Module):
    """Two-layer transformer text tower over a tiny fixed vocabulary.

    Stands in for a pretrained text encoder; the embedding is read at the
    end-of-text position and projected to ``out_dim``.
    """

    def __init__(self, token_dim: int = 32, out_dim: int = 32, max_len: int = 16, num_layers: int = 2):
        super().__init__()
        self.vocab = {w: i for i, w in enumerate(VOCAB)}
        self.token_embedding = nn.Embedding(len(VOCAB), token_dim)
        self.position = nn.Parameter(torch.randn(max_len, token_dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            token_dim, nhead=4, dim_feedforward=token_dim * 4, dropout=0.0, batch_first=True, norm_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(token_dim)
        self.proj = nn.Linear(token_dim, out_dim, bias=False)
        self.max_len = max_len

    def embed_words(self, words) -> torch.Tensor:
        ids = torch.tensor([self.vocab[w] for w in words])
        return self.token_embedding(ids)

    def forward(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        """Encode ``(N, T, token_dim)`` embedded sequences; the last position is read out."""
        n, t, _ = token_embeddings.shape
        if t > self.max_len:
            raise ShapeError(f"sequence length {t} exceeds {self.max_len}")
        x = self.encoder(token_embeddings + self.position[:t])
        return self.proj(self.norm(x[:, -1]))


class PromptBank(nn.Module):
    """Per-identity learnable tokens slotted into "a photo of a X1..XM person"."""

    def __init__(self, num_identities: int, prompt_length: int = 4, token_dim: int = 32):
        super().__init__()
        self.num_identities = num_identities
        self.prompt_length = prompt_length
        self.tokens = nn.Parameter(torch.randn(num_identities, prompt_length, token_dim) * 0.02)

    def sequences(self, text_encoder: ToyTextEncoder, identities=None) -> torch.Tensor:
        if identities is None:
            identities = torch.arange(self.num_identities)
        with torch.no_grad():
            prefix = text_encoder.embed_words(("<sot>",) + TEMPLATE_PREFIX)
            suffix = text_encoder.embed_words(TEMPLATE_SUFFIX + ("<eot>",))
        n = len(identities)
        return torch.cat(
            [prefix.expand(n, -1, -1), self.tokens[identities], suffix.expand(n, -1, -1)], dim=1
        )

    def embed(self, text_encoder: ToyTextEncoder) -> torch.Tensor:
        return text_encoder(self.sequences(text_encoder))


def alignment_loss(image_emb: torch.Tensor, text_emb: torch.Tensor, labels: torch.Tensor,
                   temperature: float = 0.07) -> torch.Tensor:
    """Symmetric image-text cross-entropy over cosine similarities.

    Image-to-text scores each image against all identity texts. Text-to-image
    scores each identity present in the batch against the per-identity means
    of the image embeddings in the batch.
    """
    img = F.normalize(image_emb, dim=-1)
    txt = F.normalize(text_emb, dim=-1)
    i2t = F.cross_entropy(img @ txt.T / temperature, labels)
    present, inverse = torch.unique(labels, return_inverse=True)
    onehot = F.one_hot(inverse, len(present)).to(img.dtype)
    centers = F.normalize(onehot.T @ img, dim=-1)
    t2i = F.cross_entropy(txt[present] @ centers.T / temperature, torch.arange(len(present)))
    return 0.5 * (i2t + t2i)


@dataclass
class AnchorResult:
    coarse: torch.Tensor
    losses: list


def anchor_prompts(prompt_bank: PromptBank, text_encoder: ToyTextEncoder, image_features,
                   labels, epochs: int = 20, lr: float = 3.5e-4, batch_size: int = 64,
                   warmup_epochs: int = 1, temperature: float = 0.07, seed: int = 0) -> AnchorResult:
    """Optimize only the prompt tokens against frozen image features.

    ``image_features`` are the frozen image encoder outputs ``(N, c_out)``;
    run the encoder beforehand (gradients never reach it). Returns the
    unit-normalized text embedding per identity.
    """
    feats = torch.as_tensor(image_features).detach().float()
    labels = torch.as_tensor(labels, dtype=torch.long)
    missing = set(labels.unique().tolist()) - set(range(prompt_bank.num_identities))
    if missing:
        raise ConfigError(f"identities without a prompt: {sorted(missing)}")
    for p in text_encoder.parameters():
        p.requires_grad_(False)
    text_encoder.eval()
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(prompt_bank.parameters(), lr=lr)
    steps_per_epoch = max(1, math.ceil(len(feats) / batch_size))
    total = max(1, epochs * steps_per_epoch)
    warm = warmup_epochs * steps_per_epoch

    def schedule(step):
        if step < warm:
            return (step + 1) / warm
        return 0.5 * (1 + math.cos(math.pi * (step - warm) / max(1, total - warm)))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, schedule)
    losses = []
    for _ in range(epochs):
        order = torch.randperm(len(feats), generator=gen)
        for start in range(0, len(feats), batch_size):
            idx = order[start:start + batch_size]
            text = prompt_bank.embed(text_encoder)
            loss = alignment_loss(feats[idx], text, labels[idx], temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
    with torch.no_grad():
        coarse = F.normalize(prompt_bank.embed(text_encoder), dim=-1)
    if losses:
        logger.info("prompt anchoring: loss %.4f -> %.4f", losses[0], losses[-1])
    return AnchorResult(coarse, losses)


def nearest_row_accuracy(features, rows, labels) -> float:
    f = F.normalize(torch.as_tensor(features).float(), dim=-1)
    r = F.normalize(torch.as_tensor(rows).float(), dim=-1)
    pred = (f @ r.T).argmax(dim=1).numpy()
    return float(np.mean(pred == np.asarray(labels)))
