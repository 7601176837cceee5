"""Finite-difference cases for every training loss and both stage aggregates.

Each case builder takes a dtype and returns ``(loss_fn, params, reference_fn)``.
For float32 the reference evaluates the same parameter values in float64.
"""

import copy

import numpy as np
import torch

from dpmkit import losses as L
from dpmkit.backbone import BackboneConfig
from dpmkit.config import Config
from dpmkit.gradcheck import check_gradients
from dpmkit.spt import recombine_tokens
from dpmkit.trainer import BatchLabels, _sps_step, build_model, dpm_losses

CFG = L.LossConfig()
B, K, C = 6, 3, 32


def _tensors(dtype, seed=0):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(B, C, generator=g, dtype=torch.float64)
    P = torch.randn(K, C, generator=g, dtype=torch.float64)
    Pc = torch.nn.functional.normalize(torch.randn(K, C, generator=g, dtype=torch.float64), dim=-1)
    m = torch.randn(B, C, generator=g, dtype=torch.float64)
    A = torch.randn(B, 4, 10, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1, 2, 2])
    to = lambda t: t.to(dtype).requires_grad_(True)
    return to(f), to(P), Pc.to(dtype), to(m), to(A), labels


def _functional(make, wrt):
    """Wrap a loss over leaf tensors; the reference recomputes from float64 casts."""
    def build(dtype):
        f, P, Pc, m, A, labels = _tensors(dtype)
        params = {"f": f, "P": P, "m": m, "A": A}
        fn = lambda cast=(lambda t: t): make(cast(f), cast(P), cast(Pc), cast(m), cast(A), labels)
        return fn, {k: params[k] for k in wrt}, (lambda: fn(lambda t: t.detach().double()))
    return build


def _coarse(f, P, Pc, m, A, labels):
    return L.coarse_id_loss(f, Pc, labels, scale=CFG.id_scale)


def _proto(f, P, Pc, m, A, labels):
    return L.proto_id_loss(f, P, labels, scale=CFG.id_scale)


def _masked(f, P, Pc, m, A, labels):
    return L.masked_id_loss(f, P[None] * torch.sigmoid(m)[:, None, :], labels, CFG)


def _triplet(f, P, Pc, m, A, labels):
    return L.triplet_loss(f, labels, CFG)


def _hem(f, P, Pc, m, A, labels):
    return L.hem_loss(torch.softmax(A, dim=-1))


def _budget(f, P, Pc, m, A, labels):
    return L.budget_loss(torch.sigmoid(m), 0.3, absolute=True)


def _tiny_config(dtype):
    cfg = Config.toy(backbone=BackboneConfig(image_height=16, image_width=16, patch_size=8, patch_stride=8,
                                             embed_dim=16, projected_dim=8, num_layers=2, num_heads=2))
    cfg.train.dtype = "float64" if dtype == torch.float64 else "float32"
    return cfg


def _images(seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(B, 3, 16, 16, generator=g, dtype=torch.float64) * 2 - 1


def _labels(synthetic=False):
    ids = torch.tensor([0, 0, 1, 1, 2, 2])
    syn = torch.zeros(B, dtype=torch.bool)
    cand = torch.full((B,), -1)
    if synthetic:
        syn[1], cand[1] = True, 2
    return BatchLabels(ids, torch.zeros(B, dtype=torch.long), syn, cand, np.arange(B))


def _model_case(step, synthetic):
    def build(dtype):
        cfg = _tiny_config(dtype)
        model = build_model(cfg, K)
        with torch.no_grad():
            model.prototype.set_coarse(torch.nn.functional.normalize(torch.randn(K, 8), dim=-1))
            for p in model.hmg.parameters():
                p.add_(0.05 * torch.randn_like(p))
            model.spt["decision"].linear.weight.normal_(0, 0.1)
        cfg.loss.alpha = 0.5  # weight both identity branches
        ref = copy.deepcopy(model).double()
        images = _images()
        labels = _labels(synthetic)
        binary = np.tile([1, 0], 2)

        def run(m):
            tokens = m.backbone.tokenize(images.to(m.dtype), labels.cameras)
            if synthetic:
                rows = list(tokens.unbind(0))
                rows[1] = recombine_tokens(rows[1], rows[4], binary)
                tokens = torch.stack(rows)
            return step(m, tokens, labels, cfg)[0]

        def reference():
            ref.load_state_dict(model.state_dict())
            return run(ref)

        params = {n: p.requires_grad_(True) for n, p in model.named_parameters()
                  if not n.startswith(("text.", "prompt.", "spt.backbone."))}
        return (lambda: run(model)), params, reference
    return build


CASES = {
    "coarse_id": _functional(_coarse, "f"),
    "proto_id": _functional(_proto, "fP"),
    "masked_id": _functional(_masked, "fPm"),
    "triplet": _functional(_triplet, "f"),
    "hem": _functional(_hem, "A"),
    "budget": _functional(_budget, "m"),
    "stage2_total": _model_case(_sps_step, synthetic=False),
    "stage3_total": _model_case(dpm_losses, synthetic=True),
}

TOLERANCE = {torch.float64: 1e-5, torch.float32: 1e-3}
EPS = {torch.float64: 1e-3, torch.float32: 1e-3}


def run_case(name, dtype, count=16, seed=0):
    loss_fn, params, reference = CASES[name](dtype)
    return check_gradients(loss_fn, params, count=count, eps=EPS[dtype], seed=seed, reference_fn=reference, order=4)
