"""Occluded person re-identification with masked prototype matching."""

from .backbone import BackboneConfig, VisionBackbone, count_patches
from .config import Config, load_config, parse_config
from .data import SyntheticSpec, generate_synthetic, load_manifest, render_synthetic
from .errors import (
    ConfigError,
    DegenerateBatchError,
    DPMError,
    EmptyMaskError,
    NumericError,
    SamplingError,
    ShapeError,
    StagingError,
    ValidationError,
)
from .estimator import DPMReID
from .evaluator import RetrievalReport, evaluate
from .spt import SPTConfig, SaliencyMask, iou, max_rolled_oiou, oiou, select_candidates
from .trainer import build_model, default_plan, load_checkpoint, run_stage, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "VisionBackbone", "count_patches",
    "Config", "load_config", "parse_config",
    "SyntheticSpec", "generate_synthetic", "load_manifest", "render_synthetic",
    "ConfigError", "DegenerateBatchError", "DPMError", "EmptyMaskError", "NumericError",
    "SamplingError", "ShapeError", "StagingError", "ValidationError",
    "DPMReID", "RetrievalReport", "evaluate",
    "SPTConfig", "SaliencyMask", "iou", "max_rolled_oiou", "oiou", "select_candidates",
    "build_model", "default_plan", "load_checkpoint", "run_stage", "save_checkpoint",
]
