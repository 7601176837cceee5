"""Training objectives.

Identity losses accept an optional boolean ``ignore`` matrix ``(B, K)``; a
True entry removes that class from the sample's softmax entirely, which is
how a synthesized sample's occlusion-source identity is kept out of the loss.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, DegenerateBatchError, NumericError

_EPS = 1e-12


@dataclass
class LossConfig:
    margin: float = 0.35
    scale: float = 30.0
    id_scale: float = 30.0
    triplet_margin: float = 0.3
    alpha: float = 1.0
    beta: float = 0.10
    budget_target: float = 0.3
    absolute_budget: bool = False

    def __post_init__(self):
        if self.margin < 0 or self.triplet_margin < 0 or self.alpha < 0 or self.beta < 0:
            raise ConfigError("margins, alpha and beta must be non-negative")
        if self.scale <= 0 or self.id_scale <= 0:
            raise ConfigError("scale must be positive")


@dataclass
class LossParts:
    L_id_c: float = 0.0
    L_id_p: float = 0.0
    L_id_m: float = 0.0
    L_tri: float = 0.0
    L_hem: float = 0.0
    L_budget: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return asdict(self)


def _check_labels(labels: torch.Tensor, k: int):
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")


def cosine_logits(features: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of each feature with each prototype row.

    ``prototypes`` is ``(K, c)`` shared, or ``(B, K, c)`` per sample.
    """
    fn = features.norm(dim=-1)
    pn = prototypes.norm(dim=-1)
    if (fn <= _EPS).any() or (pn <= _EPS).any():
        raise NumericError("zero-norm feature or prototype row; cosine undefined")
    f = features / fn[:, None]
    if prototypes.dim() == 2:
        return f @ (prototypes / pn[:, None]).T
    return torch.einsum("bc,bkc->bk", f, prototypes / pn[..., None])


def _masked_ce(logits: torch.Tensor, labels: torch.Tensor, ignore=None) -> torch.Tensor:
    if ignore is not None:
        ignore = ignore.clone()
        ignore[torch.arange(len(labels)), labels] = False
        logits = logits.masked_fill(ignore, float("-inf"))
    return F.cross_entropy(logits, labels)


def identity_loss(features, prototypes, labels, ignore=None, scale: float = 1.0) -> torch.Tensor:
    """Softmax cross-entropy over ``scale`` times the cosine similarities."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, prototypes.shape[-2])
    return _masked_ce(scale * cosine_logits(features, prototypes), labels, ignore)


def coarse_id_loss(features, coarse, labels, ignore=None, scale: float = 1.0) -> torch.Tensor:
    return identity_loss(features, coarse, labels, ignore, scale)


def proto_id_loss(features, learnable, labels, ignore=None, scale: float = 1.0) -> torch.Tensor:
    return identity_loss(features, learnable, labels, ignore, scale)


def margin_logits(cosines: torch.Tensor, labels, scale: float, margin: float) -> torch.Tensor:
    """``s * (cos - m)`` at the true class, ``s * cos`` elsewhere."""
    onehot = F.one_hot(torch.as_tensor(labels, dtype=torch.long), cosines.shape[-1]).to(cosines.dtype)
    return scale * (cosines - margin * onehot)


def masked_id_loss(features, masked, labels, config: LossConfig, ignore=None) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, masked.shape[-2])
    logits = margin_logits(cosine_logits(features, masked), labels, config.scale, config.margin)
    return _masked_ce(logits, labels, ignore)


def pairwise_sq_dist(features: torch.Tensor) -> torch.Tensor:
    diff = features[:, None, :] - features[None, :, :]
    return (diff * diff).sum(-1)


def triplet_loss(features, labels, config: LossConfig, valid=None) -> torch.Tensor:
    """Batch-hard triplet loss on squared Euclidean distance.

    ``valid[i, j]`` False removes ``j`` from both the positive and negative
    pools of anchor ``i``. Anchors left without a positive or a negative are
    skipped.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    b = len(labels)
    dist = pairwise_sq_dist(features)
    eye = torch.eye(b, dtype=torch.bool)
    pool = ~eye if valid is None else (torch.as_tensor(valid, dtype=torch.bool) & ~eye)
    same = labels[:, None] == labels[None, :]
    pos = same & pool
    neg = ~same & pool
    usable = pos.any(1) & neg.any(1)
    if not usable.any():
        raise DegenerateBatchError("no anchor has both a valid positive and a valid negative")
    hardest_pos = dist.masked_fill(~pos, float("-inf")).max(1).values
    hardest_neg = dist.masked_fill(~neg, float("inf")).min(1).values
    terms = F.relu(hardest_pos - hardest_neg + config.triplet_margin)
    return terms[usable].mean()


def hem_loss(attention) -> torch.Tensor:
    """Squared Frobenius distance of the row-normalized head Gram matrix from identity.

    Accepts ``(N_h, D)`` or a batch ``(B, N_h, D)`` (averaged over the batch).
    """
    a = getattr(attention, "cls_attention", attention)
    single = a.dim() == 2
    if single:
        a = a[None]
    norms = a.norm(dim=-1, keepdim=True)
    if (norms <= _EPS).any():
        raise NumericError("zero attention row")
    a = a / norms
    gram = a @ a.transpose(-1, -2)
    eye = torch.eye(a.shape[1], dtype=a.dtype)
    per_sample = ((gram - eye) ** 2).sum(dim=(-1, -2))
    return per_sample[0] if single else per_sample.mean()


def budget_loss(soft, rho: float, absolute: bool = False) -> torch.Tensor:
    """Mean patch saliency minus the retention target.

    ``soft`` is ``(D,)`` or ``(B, D)``; the per-sample value (signed unless
    ``absolute``) is averaged over the batch.
    """
    soft = torch.as_tensor(soft)
    if soft.dim() == 1:
        soft = soft[None]
    value = soft.mean(dim=-1) - rho
    return (value.abs() if absolute else value).mean()


def stage2_objective(id_loss, tri_loss, budget):
    return id_loss + tri_loss + budget


def stage3_objective(parts: dict, config: LossConfig):
    """Combine the stage-III terms; missing terms count as zero."""
    if config.alpha > 1:
        warnings.warn(f"alpha={config.alpha} > 1 gives the masked identity loss a negative weight")
    get = lambda k: parts.get(k, 0.0)
    return (
        get("L_id_c")
        + get("L_tri")
        + config.alpha * get("L_id_p")
        + (1 - config.alpha) * get("L_id_m")
        + config.beta * get("L_hem")
    )
