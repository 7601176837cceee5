"""Run configuration and the flat ``section.key = value`` file format."""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError
from .losses import LossConfig
from .mask_generator import HMGConfig, default_gate
from .spt import SPTConfig


@dataclass
class TrainConfig:
    """Optimizer and schedule settings for the three stages.

    Defaults transcribe the full-scale recipe; :meth:`Config.toy` rescales
    them for CPU-sized runs.
    """

    seed: int = 0
    dtype: str = "float32"
    ids_per_batch: int = 4
    images_per_id: int = 16
    out_dir: str = "runs"

    use_coarse: bool = True
    use_spt: bool = True
    use_mask_branch: bool = True
    random_erasing: float = 0.5
    flip: bool = True
    crop_pad: int = 2

    prompt_epochs: int = 100
    prompt_lr: float = 3.5e-4
    prompt_warmup_epochs: int = 5
    prompt_length: int = 4
    text_token_dim: int = 32
    temperature: float = 0.07

    sps_epochs: int = 60
    sps_decision_lr: float = 8e-3
    sps_momentum: float = 0.9
    sps_lr: float = 5e-5
    sps_warmup_epochs: int = 5

    dpm_epochs: int = 60
    dpm_lr: float = 5e-3
    dpm_encoder_lr: float = 1e-5
    dpm_milestones: list[int] = field(default_factory=lambda: [20, 40])
    dpm_gamma: float = 0.1
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.ids_per_batch < 2 or self.images_per_id < 2:
            raise ConfigError("need at least 2 identities and 2 images per identity per batch")


@dataclass
class DataConfig:
    manifest: str = ""
    root: str = ""


@dataclass
class EvalConfig:
    metric: str = "euclidean"
    max_rank: int = 20
    batch_size: int = 64
    masked_distance: bool = False


@dataclass
class Config:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    spt: SPTConfig = field(default_factory=SPTConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    hmg: HMGConfig = field(default_factory=HMGConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.sync()

    def sync(self):
        """Propagate shared sizes between sections."""
        if len(self.hmg.layer_gate) != self.backbone.num_layers:
            self.hmg.layer_gate = default_gate(self.backbone.num_layers)
        self.hmg.output_dim = self.backbone.projected_dim
        self.loss.budget_target = self.spt.budget_target
        return self

    @classmethod
    def toy(cls, **sections) -> "Config":
        cfg = cls(**sections)
        t = cfg.train
        t.images_per_id = 4
        t.prompt_epochs, t.prompt_lr, t.prompt_warmup_epochs = 20, 1e-2, 1
        t.sps_epochs, t.sps_decision_lr, t.sps_lr, t.sps_warmup_epochs = 20, 1e-2, 1e-3, 3
        t.dpm_epochs, t.dpm_lr, t.dpm_encoder_lr = 10, 5e-3, 1e-3
        t.dpm_milestones = [1000]
        # the signed budget drives saliency to zero on a randomly initialized backbone
        cfg.loss.absolute_budget = True
        return cfg.sync()

    def to_flat(self) -> dict[str, str]:
        flat = {}
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                flat[f"{sec.name}.{f.name}"] = _format(getattr(obj, f.name))
        return flat

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return ""
    return str(value)


def _convert(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if raw == "":
            return None
        tp = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(tp), typing.get_args(tp)
    try:
        if origin is list:
            return [_convert(p.strip(), args[0], key) for p in raw.split(",") if p.strip()]
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return tp(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp}") from exc


def parse_config(text: str) -> Config:
    values: dict[str, dict[str, str]] = {}
    preset = "default"
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if raw not in ("default", "toy"):
                raise ConfigError(f"line {n}: unknown preset {raw!r}")
            preset = raw
            continue
        if "." not in key:
            raise ConfigError(f"line {n}: key {key!r} lacks a section")
        sec, name = key.split(".", 1)
        values.setdefault(sec, {})[name] = raw
    hints = typing.get_type_hints(Config)
    sections = {}
    for sec, items in values.items():
        if sec not in hints:
            raise ConfigError(f"unknown section {sec!r}")
        cls = hints[sec]
        fhints = typing.get_type_hints(cls)
        kwargs = {}
        for name, raw in items.items():
            if name not in fhints:
                raise ConfigError(f"unknown key {sec}.{name}")
            kwargs[name] = _convert(raw, fhints[name], f"{sec}.{name}")
        sections[sec] = kwargs
    base = Config.toy() if preset == "toy" else Config()
    out = {}
    for f in dataclasses.fields(Config):
        current = getattr(base, f.name)
        out[f.name] = dataclasses.replace(current, **sections.get(f.name, {}))
    cfg = Config(**out)
    env_seed = os.environ.get("DPMKIT_SEED")
    if env_seed:
        try:
            cfg.train.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"DPMKIT_SEED must be an integer, got {env_seed!r}") from exc
    return cfg


def load_config(path) -> Config:
    path = Path(path)
    cfg = parse_config(path.read_text(encoding="utf-8"))
    base = path.parent
    for attr in ("manifest", "root"):
        val = getattr(cfg.data, attr)
        if val and not Path(val).is_absolute():
            setattr(cfg.data, attr, os.path.normpath(base / val))
    if cfg.train.out_dir and not Path(cfg.train.out_dir).is_absolute():
        cfg.train.out_dir = os.path.normpath(base / cfg.train.out_dir)
    return cfg
