"""Retrieval evaluation (CMC / mAP) and attention-head correlation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError


@dataclass
class RetrievalReport:
    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray
    num_queries: int
    num_gallery: int
    excluded_queries: list[int] = field(default_factory=list)

    def rank(self, r: int) -> float:
        return float(self.cmc[r - 1])

    def to_dict(self) -> dict:
        return {
            "map": float(self.map),
            "cmc": [float(v) for v in self.cmc],
            "ranks": list(range(1, len(self.cmc) + 1)),
            "excluded_queries": list(self.excluded_queries),
            "num_queries": self.num_queries,
            "num_gallery": self.num_gallery,
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        with open(path.with_suffix(".cmc.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "rate"])
            for r, v in enumerate(self.cmc, 1):
                w.writerow([r, repr(float(v))])
        return path


def distance_matrix(query: np.ndarray, gallery: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ShapeError("query and gallery feature widths differ")
    if metric == "cosine":
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        gn = g / np.linalg.norm(g, axis=1, keepdims=True)
        return 1.0 - qn @ gn.T
    if metric != "euclidean":
        raise ValueError(f"unknown metric {metric!r}")
    d = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2 * q @ g.T
    return np.sqrt(np.maximum(d, 0.0))


def evaluate_distances(dist, q_ids, g_ids, q_cams, g_cams, max_rank: int = 50) -> RetrievalReport:
    """CMC and mAP from a precomputed ``(Q, G)`` distance matrix.

    Gallery entries sharing identity and camera with the query are dropped;
    ties go to the lower gallery index.
    """
    dist = np.asarray(dist)
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    nq, ng = dist.shape
    if ng == 0:
        raise ShapeError("gallery is empty")
    max_rank = min(max_rank, ng)
    cmc_hits = np.zeros(max_rank)
    aps, excluded = [], []
    for qi in range(nq):
        order = np.argsort(dist[qi], kind="stable")
        keep = ~((g_ids[order] == q_ids[qi]) & (g_cams[order] == q_cams[qi]))
        matches = (g_ids[order] == q_ids[qi])[keep]
        if not matches.any():
            excluded.append(qi)
            continue
        hits = np.flatnonzero(matches)
        if hits[0] < max_rank:
            cmc_hits[hits[0]:] += 1
        precision = np.arange(1, len(hits) + 1) / (hits + 1)
        aps.append(precision.mean())
    valid = nq - len(excluded)
    if valid == 0:
        return RetrievalReport(np.zeros(max_rank), 0.0, np.array([]), nq, ng, excluded)
    return RetrievalReport(cmc_hits / valid, float(np.mean(aps)), np.array(aps), nq, ng, excluded)


def evaluate(query_features, gallery_features, q_ids, g_ids, q_cams, g_cams,
             max_rank: int = 50, metric: str = "euclidean") -> RetrievalReport:
    dist = distance_matrix(query_features, gallery_features, metric)
    return evaluate_distances(dist, q_ids, g_ids, q_cams, g_cams, max_rank)


@torch.no_grad()
def embed(model, images: torch.Tensor, cameras, batch_size: int = 64) -> np.ndarray:
    """Projected CLS features, one row per image."""
    model.eval()
    cameras = np.asarray(cameras)
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model.features(images[i:i + batch_size], cameras[i:i + batch_size]))
    return torch.cat(out).double().numpy()


@torch.no_grad()
def masked_features(model, images: torch.Tensor, cameras, batch_size: int = 64) -> np.ndarray:
    """Features scaled by each image's own predicted prototype mask (experimental)."""
    model.eval()
    cameras = np.asarray(cameras)
    out = []
    for i in range(0, len(images), batch_size):
        bb = model.backbone
        seq, _ = bb(bb.tokenize(images[i:i + batch_size].to(model.dtype), cameras[i:i + batch_size]))
        out.append(seq.projected_cls * model.hmg(seq))
    return torch.cat(out).double().numpy()


def head_correlation_from_attention(attention: torch.Tensor) -> np.ndarray:
    """Mean over samples of pairwise cosine similarity between head rows, ``(N_h, N_h)``."""
    a = torch.as_tensor(attention).double()
    if a.dim() == 2:
        a = a[None]
    a = F.normalize(a, dim=-1)
    return (a @ a.transpose(-1, -2)).mean(0).numpy()


@torch.no_grad()
def head_correlation(model, images: torch.Tensor, cameras, batch_size: int = 64) -> np.ndarray:
    if len(images) == 0:
        raise ShapeError("probe set is empty")
    model.eval()
    cameras = np.asarray(cameras)
    rows = []
    for i in range(0, len(images), batch_size):
        bb = model.backbone
        _, att = bb(bb.tokenize(images[i:i + batch_size].to(model.dtype), cameras[i:i + batch_size]))
        rows.append(att.cls_attention)
    return head_correlation_from_attention(torch.cat(rows))


def mean_offdiag(matrix) -> float:
    m = np.asarray(matrix)
    n = m.shape[0]
    if n < 2:
        return 0.0
    return float(np.abs(m[~np.eye(n, dtype=bool)]).mean())


def write_matrix_csv(matrix, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in np.asarray(matrix):
            w.writerow([repr(float(v)) for v in row])
    return path
