"""Scikit-learn style front end over the three-stage pipeline."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import Config, parse_config
from .data import ReIDData
from .evaluator import RetrievalReport, embed, evaluate
from .losses import cosine_logits
from .trainer import STAGES, build_model, load_checkpoint, save_checkpoint, train_pipeline
from .validation import check_cameras, check_identities, check_images


class DPMReID(TransformerMixin, BaseEstimator):
    """Occlusion-robust re-identification embedder.

    ``fit`` runs the training stages on labelled images, ``transform`` returns
    the projected CLS embeddings, ``predict`` assigns each image to the nearest
    learned identity prototype.

    Parameters
    ----------
    preset : {"toy", "default"}
        Base configuration before ``overrides`` are applied.
    overrides : dict, optional
        Flat ``{"section.key": value}`` settings, as in config files.
    stages : tuple of str
        Stages to run, in order.
    seed : int
        Overrides ``train.seed``.
    """

    def __init__(self, preset="toy", overrides=None, stages=STAGES, seed=0):
        self.preset = preset
        self.overrides = overrides
        self.stages = stages
        self.seed = seed

    def _config(self) -> Config:
        lines = [f"preset = {self.preset}"]
        for key, value in (self.overrides or {}).items():
            if isinstance(value, (list, tuple)):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append(f"train.seed = {int(self.seed)}")
        return parse_config("\n".join(lines))

    def fit(self, X, y, cameras=None):
        config = self._config()
        bc = config.backbone
        images = check_images(X, (bc.image_height, bc.image_width))
        self.classes_, labels = check_identities(y, len(images))
        cams = check_cameras(cameras, len(images), bc.num_cameras)
        data = ReIDData(images, labels, cams, np.zeros(len(images), dtype=bool))
        self.config_ = config
        self.model_ = build_model(config, len(self.classes_))
        self.history_ = {
            stage: result.metrics
            for stage, result in train_pipeline(self.model_, data, config, self.stages).items()
        }
        return self

    def _inputs(self, X, cameras):
        check_is_fitted(self, "model_")
        bc = self.config_.backbone
        images = check_images(X, (bc.image_height, bc.image_width))
        return images, check_cameras(cameras, len(images), bc.num_cameras)

    def transform(self, X, cameras=None) -> np.ndarray:
        images, cams = self._inputs(X, cameras)
        return embed(self.model_, images, cams, self.config_.eval.batch_size)

    def predict(self, X, cameras=None) -> np.ndarray:
        feats = torch.from_numpy(self.transform(X, cameras))
        protos = self.model_.prototype.learnable.detach().double()
        return self.classes_[cosine_logits(feats, protos).argmax(1).numpy()]

    def retrieval_report(self, query, query_ids, gallery, gallery_ids,
                         query_cameras=None, gallery_cameras=None) -> RetrievalReport:
        qf, gf = self.transform(query, query_cameras), self.transform(gallery, gallery_cameras)
        qc = check_cameras(query_cameras, len(qf), self.config_.backbone.num_cameras)
        gc = check_cameras(gallery_cameras, len(gf), self.config_.backbone.num_cameras)
        return evaluate(qf, gf, np.asarray(query_ids), np.asarray(gallery_ids), qc, gc,
                        self.config_.eval.max_rank, self.config_.eval.metric)

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(self.model_, path)

    @classmethod
    def load(cls, path, classes=None) -> "DPMReID":
        model = load_checkpoint(path)
        est = cls(seed=model.config.train.seed)
        est.model_, est.config_ = model, model.config
        est.classes_ = np.arange(model.num_identities) if classes is None else np.asarray(classes)
        est.history_ = {}
        return est
