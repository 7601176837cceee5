"""Three-stage training: prompt anchoring, salient patch selection, masked prototype learning."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .archive import encode_archive, read_archive, write_archive
from .backbone import VisionBackbone
from .config import Config, parse_config
from .data import ReIDData, augment
from .errors import NumericError, SamplingError, StagingError
from .mask_generator import HierarchicalMaskGenerator
from .prototypes import PromptBank, PrototypeBank, ToyTextEncoder, alignment_loss
from .spt import SaliencyDecision, SaliencyMask, filter_tokens, recombine_tokens, select_candidates

logger = logging.getLogger(__name__)

STAGES = ("prompt", "sps", "dpm")


class DPMModel(nn.Module):
    """All learnable and frozen state; submodule names fix the archive entry prefixes."""

    def __init__(self, config: Config, num_identities: int):
        super().__init__()
        bc = config.backbone
        self.config = config
        self.num_identities = num_identities
        self.backbone = VisionBackbone(bc)
        self.spt = nn.ModuleDict({
            "decision": SaliencyDecision(bc.embed_dim, bc.num_layers),
            "head": nn.Linear(bc.projected_dim, num_identities, bias=False),
            "backbone": VisionBackbone(bc),
        })
        self.hmg = HierarchicalMaskGenerator(config.hmg, bc.embed_dim, bc.grid_shape)
        self.prototype = PrototypeBank(num_identities, bc.projected_dim)
        self.prompt = PromptBank(num_identities, config.train.prompt_length, config.train.text_token_dim)
        self.text = ToyTextEncoder(config.train.text_token_dim, bc.projected_dim)
        self.spt["backbone"].load_state_dict(self.backbone.state_dict())
        for p in self.text.parameters():
            p.requires_grad_(False)
        self.stages_completed: list[str] = []

    @property
    def dtype(self):
        return self.backbone.cls_token.dtype

    def features(self, images: torch.Tensor, cameras) -> torch.Tensor:
        return self.backbone.encode(images.to(self.dtype), cameras)

    def saliency(self, images: torch.Tensor, cameras) -> torch.Tensor:
        """Soft saliency from the frozen selection branch, ``(B, D)``."""
        sb = self.spt["backbone"]
        with torch.no_grad():
            seq, _ = sb(sb.tokenize(images.to(self.dtype), cameras))
            return self.spt["decision"](seq)


def build_model(config: Config, num_identities: int) -> DPMModel:
    torch.manual_seed(config.train.seed)
    model = DPMModel(config, num_identities)
    if config.train.dtype == "float64":
        model = model.double()
    return model


# ---------------------------------------------------------------- checkpoints

def state_entries(model: DPMModel) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def state_metadata(model: DPMModel) -> dict:
    return {
        "stages_completed": list(model.stages_completed),
        "num_identities": model.num_identities,
        "has_coarse": bool(model.prototype.has_coarse),
        "config": model.config.to_flat(),
    }


def state_checksum(model: DPMModel) -> str:
    return hashlib.sha256(encode_archive(state_entries(model), state_metadata(model))).hexdigest()


def save_checkpoint(model: DPMModel, path) -> Path:
    return write_archive(state_entries(model), path, state_metadata(model))


def load_checkpoint(path, config: Config | None = None) -> DPMModel:
    entries, meta = read_archive(path)
    if config is None:
        text = "".join(f"{k} = {v}\n" for k, v in meta["config"].items())
        config = parse_config(text)
    model = build_model(config, int(meta["num_identities"]))
    state = {k: torch.from_numpy(v) for k, v in entries.items()}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise StagingError(f"checkpoint {path} lacks entries {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.stages_completed = list(meta.get("stages_completed", []))
    model.prototype.has_coarse = bool(meta.get("has_coarse", False))
    return model


# ---------------------------------------------------------------- sampling

@dataclass
class PKSampler:
    identities_per_batch: int
    images_per_identity: int
    seed: int = 0

    @property
    def batch_size(self) -> int:
        return self.identities_per_batch * self.images_per_identity

    def epoch(self, labels, rng: np.random.Generator) -> list[np.ndarray]:
        """Index batches for one epoch.

        Each identity's images are shuffled and chunked into groups of
        ``images_per_identity`` (topped up with repeats when short); batches
        draw one group from each of ``identities_per_batch`` identities.
        """
        labels = np.asarray(labels)
        ids = np.unique(labels)
        if len(ids) < self.identities_per_batch:
            raise SamplingError(
                f"need {self.identities_per_batch} identities per batch, dataset has {len(ids)}"
            )
        k = self.images_per_identity
        groups = {}
        for pid in ids:
            idx = rng.permutation(np.flatnonzero(labels == pid))
            if len(idx) < k:
                idx = np.concatenate([idx, rng.choice(idx, k - len(idx), replace=True)])
            n = len(idx) // k
            groups[pid] = [idx[i * k:(i + 1) * k] for i in range(n)]
        batches = []
        while True:
            avail = [pid for pid in ids if groups[pid]]
            if len(avail) < self.identities_per_batch:
                break
            chosen = rng.choice(avail, self.identities_per_batch, replace=False)
            batches.append(np.concatenate([groups[pid].pop() for pid in chosen]))
        return batches


# ---------------------------------------------------------------- stage plans

@dataclass
class OptimSpec:
    name: str
    lr: float
    kind: str = "adam"
    weight_decay: float = 0.0
    momentum: float = 0.0
    warmup_epochs: int = 0


@dataclass
class StagePlan:
    stage: str
    epochs: int
    groups: list[OptimSpec] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)
    milestones: list[int] = field(default_factory=list)
    gamma: float = 0.1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise StagingError(f"unknown stage {self.stage!r}")


def default_plan(stage: str, config: Config) -> StagePlan:
    t = config.train
    if stage == "prompt":
        return StagePlan("prompt", t.prompt_epochs,
                         [OptimSpec("prompt", t.prompt_lr, warmup_epochs=t.prompt_warmup_epochs)],
                         frozen=["backbone", "text"])
    if stage == "sps":
        return StagePlan("sps", t.sps_epochs, [
            OptimSpec("spt.decision", t.sps_decision_lr, kind="sgd", momentum=t.sps_momentum,
                      warmup_epochs=t.sps_warmup_epochs),
            OptimSpec("backbone", t.sps_lr, warmup_epochs=t.sps_warmup_epochs),
            OptimSpec("spt.head", t.sps_lr, warmup_epochs=t.sps_warmup_epochs),
        ], frozen=["prototype.coarse", "text"])
    if stage == "dpm":
        return StagePlan("dpm", t.dpm_epochs, [
            OptimSpec("backbone", t.dpm_encoder_lr, weight_decay=t.weight_decay),
            OptimSpec("hmg", t.dpm_lr, weight_decay=t.weight_decay),
            OptimSpec("prototype.learnable", t.dpm_lr, weight_decay=t.weight_decay),
        ], frozen=["spt", "prototype.coarse", "text"], milestones=list(t.dpm_milestones), gamma=t.dpm_gamma)
    raise StagingError(f"unknown stage {stage!r}")


def _named(model: nn.Module, prefix: str) -> list[tuple[str, torch.Tensor]]:
    tensors = list(model.named_parameters()) + list(model.named_buffers())
    return [(n, p) for n, p in tensors if n == prefix or n.startswith(prefix + ".")]


def _params(model: nn.Module, prefix: str) -> list[nn.Parameter]:
    return [p for n, p in model.named_parameters() if n == prefix or n.startswith(prefix + ".")]


def check_prerequisites(stage: str, model: DPMModel, config: Config):
    done = set(model.stages_completed)
    if stage == "sps" and config.train.use_coarse and "prompt" not in done:
        raise StagingError("stage 'sps' with coarse anchoring enabled requires a completed 'prompt' stage")
    if stage == "dpm" and "sps" not in done:
        raise StagingError("stage 'dpm' requires a completed 'sps' stage")


def _optimizers(model, plan: StagePlan, steps_per_epoch: int):
    opts, scheds = [], []
    for spec in plan.groups:
        params = _params(model, spec.name)
        if not params:
            continue
        for p in params:
            p.requires_grad_(True)
        if spec.kind == "sgd":
            opt = torch.optim.SGD(params, lr=spec.lr, momentum=spec.momentum, weight_decay=spec.weight_decay)
        else:
            opt = torch.optim.Adam(params, lr=spec.lr, weight_decay=spec.weight_decay)
        total = max(1, plan.epochs * steps_per_epoch)
        warm = spec.warmup_epochs * steps_per_epoch
        milestones = [m * steps_per_epoch for m in plan.milestones]

        def factor(step, warm=warm, total=total, milestones=milestones, stage=plan.stage):
            w = (step + 1) / warm if step < warm else 1.0
            if stage == "prompt":
                if step >= warm:
                    w = 0.5 * (1 + math.cos(math.pi * (step - warm) / max(1, total - warm)))
                return w
            return w * plan.gamma ** sum(step >= m for m in milestones)

        opts.append(opt)
        scheds.append(torch.optim.lr_scheduler.LambdaLR(opt, factor))
    return opts, scheds


# ---------------------------------------------------------------- batches

@dataclass
class BatchLabels:
    identities: torch.Tensor
    cameras: torch.Tensor
    is_synthetic: torch.Tensor
    candidate_identity: torch.Tensor
    indices: np.ndarray

    def ignore_matrix(self, num_classes: int) -> torch.Tensor:
        ignore = torch.zeros(len(self.identities), num_classes, dtype=torch.bool)
        syn = torch.nonzero(self.is_synthetic).flatten()
        ignore[syn, self.candidate_identity[syn]] = True
        return ignore

    def valid_pairs(self) -> torch.Tensor:
        """Mining pools with synthetic samples cut off from their candidate identity."""
        b = len(self.identities)
        valid = torch.ones(b, b, dtype=torch.bool)
        for i in torch.nonzero(self.is_synthetic).flatten().tolist():
            hit = self.identities == self.candidate_identity[i]
            valid[i, hit] = False
            valid[hit, i] = False
        return valid


def build_batch(indices, data: ReIDData, model: DPMModel, config: Config, rng: np.random.Generator,
                gen: torch.Generator, use_spt: bool = False, augment_images: bool = True):
    """Layer-0 tokens and labels for one batch, with optional in-batch synthesis.

    Eligible pairs replace their target slot with the recombined sequence with
    probability ``spt.synth_prob``; each slot is replaced at most once.
    """
    indices = np.asarray(indices)
    t = config.train
    images = data.images[torch.as_tensor(indices)].to(model.dtype)
    if augment_images:
        images = augment(images, gen, flip=t.flip, crop_pad=t.crop_pad, erase_prob=t.random_erasing)
    cams = torch.as_tensor(data.cameras[indices], dtype=torch.long)
    ids = torch.as_tensor(data.identities[indices], dtype=torch.long)
    tokens = model.backbone.tokenize(images, cams)
    b = len(indices)
    synthetic = torch.zeros(b, dtype=torch.bool)
    candidate = torch.full((b,), -1, dtype=torch.long)
    if use_spt:
        soft = model.saliency(images, cams).double().numpy()
        grid = config.backbone.grid_shape
        masks = [SaliencyMask(s, grid, config.spt.binarize_threshold) for s in soft]
        pairs = select_candidates(masks, ids.tolist(), config.spt)
        rows = list(tokens.unbind(0))
        for i, j, _score in pairs:
            if synthetic[i] or rng.random() >= config.spt.synth_prob:
                continue
            rows[i] = recombine_tokens(rows[i], rows[j], masks[j].binary)
            synthetic[i] = True
            candidate[i] = ids[j]
        tokens = torch.stack(rows)
    return tokens, BatchLabels(ids, cams, synthetic, candidate, indices)


# ---------------------------------------------------------------- stage loops

def _write_log(log, record: dict):
    if log is not None:
        log.write(json.dumps(record, sort_keys=True) + "\n")
        log.flush()


def _check_finite(total: torch.Tensor, labels: BatchLabels, stage: str, epoch: int, dump_dir):
    if torch.isfinite(total):
        return
    info = {"stage": stage, "epoch": epoch, "batch_indices": labels.indices.tolist()}
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        (Path(dump_dir) / "nan_dump.json").write_text(json.dumps(info), encoding="utf-8")
    raise NumericError(f"non-finite loss in stage {stage} epoch {epoch}; batch indices {info['batch_indices']}")


def _prompt_stage(model: DPMModel, data: ReIDData, config: Config, plan: StagePlan, log, metrics):
    t = config.train
    with torch.no_grad():
        model.backbone.eval()
        feats = torch.cat([
            model.features(data.images[i:i + 256], data.cameras[i:i + 256]) for i in range(0, len(data), 256)
        ])
    labels = torch.as_tensor(data.identities, dtype=torch.long)
    bs = t.ids_per_batch * t.images_per_id
    steps = max(1, math.ceil(len(feats) / bs))
    opts, scheds = _optimizers(model, plan, steps)
    gen = torch.Generator().manual_seed(t.seed)
    step = 0
    for epoch in range(plan.epochs):
        order = torch.randperm(len(feats), generator=gen)
        totals = []
        for start in range(0, len(feats), bs):
            idx = order[start:start + bs]
            text = model.prompt.embed(model.text)
            loss = alignment_loss(feats[idx], text, labels[idx], t.temperature)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss in stage prompt epoch {epoch}; batch indices {idx.tolist()}")
            for o in opts:
                o.zero_grad()
            loss.backward()
            for o, s in zip(opts, scheds):
                o.step()
                s.step()
            _write_log(log, {"stage": "prompt", "epoch": epoch, "step": step, "L_align": loss.item(), "total": loss.item()})
            totals.append(loss.item())
            step += 1
        metrics.append({"stage": "prompt", "epoch": epoch, "total": float(np.mean(totals))})
    with torch.no_grad():
        model.prototype.set_coarse(F.normalize(model.prompt.embed(model.text), dim=-1))


def _sps_step(model: DPMModel, tokens, labels: BatchLabels, config: Config):
    seq, _ = model.backbone(tokens)
    soft = model.spt["decision"](seq)
    seq2, _ = model.backbone(filter_tokens(tokens, soft))
    f = seq2.projected_cls
    cos = L.cosine_logits(f, model.spt["head"].weight)
    l_id = F.cross_entropy(config.loss.scale * cos, labels.identities)
    l_tri = L.triplet_loss(f, labels.identities, config.loss)
    l_budget = L.budget_loss(soft, config.spt.budget_target, config.loss.absolute_budget)
    total = L.stage2_objective(l_id, l_tri, l_budget)
    parts = {"L_id_p": l_id.item(), "L_tri": l_tri.item(), "L_budget": l_budget.item(),
             "mean_saliency": soft.mean().item()}
    return total, parts


def dpm_losses(model: DPMModel, tokens, labels: BatchLabels, config: Config):
    """Stage-III objective and its logged components for one batch."""
    t = config.train
    seq, attention = model.backbone(tokens)
    f = seq.projected_cls
    k = model.num_identities
    ignore = labels.ignore_matrix(k) if labels.is_synthetic.any() else None
    parts = {}
    if t.use_coarse and model.prototype.has_coarse:
        parts["L_id_c"] = L.coarse_id_loss(f, model.prototype.coarse.to(f.dtype), labels.identities, ignore,
                                          config.loss.id_scale)
    parts["L_id_p"] = L.proto_id_loss(f, model.prototype.learnable, labels.identities, ignore, config.loss.id_scale)
    if t.use_mask_branch:
        masked = model.prototype.apply_mask(model.hmg(seq))
        parts["L_id_m"] = L.masked_id_loss(f, masked, labels.identities, config.loss, ignore)
    valid = labels.valid_pairs() if labels.is_synthetic.any() else None
    parts["L_tri"] = L.triplet_loss(f, labels.identities, config.loss, valid)
    parts["L_hem"] = L.hem_loss(attention)
    total = L.stage3_objective(parts, config.loss)
    logged = {name: float(v.detach()) for name, v in parts.items()}
    return total, logged


def _batched_stage(model: DPMModel, data: ReIDData, config: Config, plan: StagePlan, log, metrics,
                   checkpoint_path=None):
    t = config.train
    sampler = PKSampler(t.ids_per_batch, t.images_per_id, t.seed)
    rng = np.random.default_rng([t.seed, STAGES.index(plan.stage)])
    # synthesis draws come from their own stream so toggling SPT leaves batches and augmentation unchanged
    synth_rng = np.random.default_rng([t.seed, STAGES.index(plan.stage), 1])
    gen = torch.Generator().manual_seed(t.seed + 7919 * STAGES.index(plan.stage))
    epoch_batches = sampler.epoch(data.identities, np.random.default_rng([t.seed, 99]))
    opts, scheds = _optimizers(model, plan, max(1, len(epoch_batches)))
    step = 0
    for epoch in range(plan.epochs):
        model.train()
        totals = []
        extra = {}
        for idx in sampler.epoch(data.identities, rng):
            use_spt = plan.stage == "dpm" and t.use_spt
            tokens, labels = build_batch(idx, data, model, config, synth_rng, gen, use_spt=use_spt)
            if plan.stage == "sps":
                total, parts = _sps_step(model, tokens, labels, config)
            else:
                total, parts = dpm_losses(model, tokens, labels, config)
                parts["num_synthetic"] = int(labels.is_synthetic.sum())
            _check_finite(total, labels, plan.stage, epoch, checkpoint_path and Path(checkpoint_path).parent)
            for o in opts:
                o.zero_grad()
            total.backward()
            for o, s in zip(opts, scheds):
                o.step()
                s.step()
            record = {"stage": plan.stage, "epoch": epoch, "step": step, **parts, "total": total.item()}
            _write_log(log, record)
            totals.append(total.item())
            for key, v in parts.items():
                extra.setdefault(key, []).append(v)
            step += 1
        metrics.append({"stage": plan.stage, "epoch": epoch, "total": float(np.mean(totals)),
                        **{k: float(np.mean(v)) for k, v in extra.items()}})
        logger.info("%s epoch %d: total %.4f", plan.stage, epoch, metrics[-1]["total"])
        if checkpoint_path is not None and epoch + 1 in plan.milestones and epoch + 1 < plan.epochs:
            p = Path(checkpoint_path)
            save_checkpoint(model, p.with_name(f"{p.stem}_e{epoch + 1}{p.suffix}"))


@dataclass
class StageResult:
    model: DPMModel
    metrics: list = field(default_factory=list)
    checkpoint: Path | None = None


def run_stage(plan: StagePlan, model: DPMModel, data: ReIDData, config: Config,
              log_path=None, checkpoint_path=None) -> StageResult:
    """Run one stage in place on ``model``.

    Raises :class:`StagingError` for missing prerequisites or if a parameter
    group declared frozen changed.
    """
    check_prerequisites(plan.stage, model, config)
    if plan.epochs <= 0:
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path)
        return StageResult(model, [], Path(checkpoint_path) if checkpoint_path else None)
    torch.manual_seed(config.train.seed + STAGES.index(plan.stage))
    for p in model.parameters():
        p.requires_grad_(False)
    frozen = {n: p.detach().clone() for prefix in plan.frozen for n, p in _named(model, prefix)}
    metrics: list = []
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        if plan.stage == "prompt":
            _prompt_stage(model, data, config, plan, log, metrics)
        else:
            _batched_stage(model, data, config, plan, log, metrics, checkpoint_path)
    finally:
        if log is not None:
            log.close()
        for p in model.parameters():
            p.requires_grad_(False)
    for n, before in frozen.items():
        now = dict(_named(model, n))[n]
        if not torch.equal(before, now):
            raise StagingError(f"frozen tensor {n} changed during stage {plan.stage}")
    if plan.stage == "sps":
        model.spt["backbone"].load_state_dict(model.backbone.state_dict())
    model.eval()
    if plan.stage not in model.stages_completed:
        model.stages_completed.append(plan.stage)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return StageResult(model, metrics, Path(checkpoint_path) if checkpoint_path else None)


def train_pipeline(model: DPMModel, data: ReIDData, config: Config, stages=STAGES, out_dir=None):
    results = {}
    for stage in stages:
        if stage == "prompt" and not config.train.use_coarse:
            continue
        ckpt = log = None
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            ckpt, log = Path(out_dir) / f"{stage}.ckpt", Path(out_dir) / f"{stage}_metrics.jsonl"
        results[stage] = run_stage(default_plan(stage, config), model, data, config, log, ckpt)
    return results


def clone_model(model: DPMModel) -> DPMModel:
    return copy.deepcopy(model)
