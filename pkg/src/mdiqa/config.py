"""Run configuration: model, data, two training stages, restoration and loss weights.

Config files are JSON. Every section is optional; missing keys take the
defaults of the preset named by the top-level ``"preset"`` key (``"desk"``
when absent)::

    {
      "preset": "desk",
      "seed": 0,
      "model":   {...ModelConfig fields...},
      "data":    {"n_samples": 1000, "size": 96, ...},
      "stage1":  {"lr": 0.002, "epochs": 72, ...},
      "stage2":  {...},
      "restore": {...},
      "loss":    {"alpha_nin": 1.0, "lambda_org": 10.0, "lambda_nr": 1.0, "lambda_fr": 5.0},
      "ratios":  {"sharpness": 2.0}
    }
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from .registry import ConfigError, ModelConfig, validate_config

# parameter group names used by StagePlan and the trainer
GROUPS = (
    "backbone.technical",
    "backbone.aesthetic",
    "heads.csam",
    "heads.injection",
    "heads.regressor",
    "weight_branch",
    "fusion",
    "semantic_encoder",
)


def _from_dict(cls, d, section):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _to_dict(obj):
    d = asdict(obj)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


@dataclass
class StagePlan:
    stage: str
    trainable: Tuple[str, ...]
    frozen: Tuple[str, ...]
    epochs: int
    lr: float
    weight_decay: float
    batch_size: int
    crop: int
    # stage one trains the aesthetic branch for its own epoch count
    aesthetic_epochs: Optional[int] = None
    lr_min: float = 0.0
    schedule: str = "cosine"
    optimizer: str = "adamw"

    def validate(self):
        if self.stage not in ("one", "two"):
            raise ConfigError(f"stage must be 'one' or 'two', got {self.stage!r}")
        bad = (set(self.trainable) | set(self.frozen)) - set(GROUPS)
        if bad:
            raise ConfigError(f"unknown parameter groups: {sorted(bad)}")
        if set(self.trainable) & set(self.frozen):
            raise ConfigError("a parameter group cannot be both trainable and frozen")
        if self.stage == "one":
            for g in ("heads.injection", "weight_branch", "fusion"):
                if g in self.trainable:
                    raise ConfigError(f"stage one must not train {g}")
        else:
            for g in ("backbone.technical", "backbone.aesthetic", "heads.csam"):
                if g not in self.frozen:
                    raise ConfigError(f"stage two must freeze {g}")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.epochs < 0 or (self.aesthetic_epochs or 0) < 0:
            raise ConfigError("epochs must be non-negative")
        return self


def stage_one_plan(**kw) -> StagePlan:
    base = dict(
        stage="one",
        trainable=("backbone.technical", "backbone.aesthetic", "heads.csam", "heads.regressor"),
        frozen=("heads.injection", "weight_branch", "fusion", "semantic_encoder"),
        epochs=8, aesthetic_epochs=4, lr=3e-5, weight_decay=1e-5, batch_size=16, crop=384,
    )
    base.update(kw)
    return StagePlan(**base).validate()


def stage_two_plan(finetune_regressor=True, **kw) -> StagePlan:
    trainable = ("heads.injection", "weight_branch", "fusion")
    frozen = ("backbone.technical", "backbone.aesthetic", "heads.csam", "semantic_encoder")
    if finetune_regressor:
        trainable += ("heads.regressor",)
    else:
        frozen += ("heads.regressor",)
    base = dict(stage="two", trainable=trainable, frozen=frozen, epochs=5, lr=1e-5,
                weight_decay=1e-5, batch_size=16, crop=384)
    base.update(kw)
    return StagePlan(**base).validate()


@dataclass
class RestorePlan:
    iterations: int = 60000
    batch_size: int = 12
    lr: float = 3e-5
    optimizer: str = "adam"
    crop: int = 384
    variant: str = "fr"
    restorer_width: int = 32
    restorer_depth: int = 8
    blur: float = 0.4
    noise: float = 0.4
    n_train: int = 800
    n_val: int = 64
    val_every: int = 1000
    pretrain_steps: int = 10000
    pretrain_lr: float = 1e-4
    seed: int = 0


@dataclass
class DataConfig:
    n_samples: int = 1000
    size: int = 96
    presence: float = 0.5
    max_severity: float = 1.0
    val_fraction: float = 0.2
    manifest: Optional[str] = None
    seed: int = 0


@dataclass
class LossWeights:
    alpha_nin: float = 1.0
    lambda_org: float = 1.0
    lambda_nr: float = 1.0
    lambda_fr: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")


@dataclass
class RunConfig:
    model: ModelConfig
    data: DataConfig
    stage1: StagePlan
    stage2: StagePlan
    restore: RestorePlan
    loss: LossWeights
    ratios: Dict[str, float] = field(default_factory=dict)
    seed: int = 0
    preset: str = "desk"

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "data": _to_dict(self.data),
            "stage1": _to_dict(self.stage1),
            "stage2": _to_dict(self.stage2),
            "restore": _to_dict(self.restore),
            "loss": _to_dict(self.loss),
            "ratios": dict(self.ratios),
        }

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, model=replace(self.model, seed=seed),
                       data=replace(self.data, seed=seed),
                       restore=replace(self.restore, seed=seed))


def full_scale() -> RunConfig:
    """Hyperparameters of the published full-scale setup."""
    model = ModelConfig(crop=384)
    return RunConfig(
        model=model,
        data=DataConfig(size=384),
        stage1=stage_one_plan(),
        stage2=stage_two_plan(),
        restore=RestorePlan(),
        loss=LossWeights(),
        preset="full",
    )


def desk_scale() -> RunConfig:
    """Tiny CPU configuration used by the tests and the acceptance suite."""
    model = ModelConfig(
        backbone_widths=(16, 32, 48), stem_width=16, head_width=16, feature_width=16,
        semantic_width=16, weight_width=8, fusion_hidden=16, crop=96,
    )
    return RunConfig(
        model=model,
        data=DataConfig(n_samples=1000, size=96, presence=1.0, max_severity=0.8),
        stage1=stage_one_plan(epochs=72, aesthetic_epochs=24, lr=2e-3, weight_decay=1e-5,
                              batch_size=16, crop=64, lr_min=2e-5),
        stage2=stage_two_plan(epochs=6, lr=1e-3, weight_decay=1e-5, batch_size=16, crop=96,
                              lr_min=1e-5),
        restore=RestorePlan(iterations=300, batch_size=8, lr=3e-4, crop=64, restorer_width=16,
                            n_train=96, n_val=16, val_every=100, pretrain_steps=300,
                            pretrain_lr=1e-3),
        # plain L1 stands in for a much larger perceptual+adversarial restoration loss
        loss=LossWeights(lambda_org=10.0),
        preset="desk",
    )


PRESETS = {"desk": desk_scale, "full": full_scale}


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    preset = d.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]()
    known = {"seed", "model", "data", "stage1", "stage2", "restore", "loss", "ratios"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model = base.model.to_dict()
    model.update(d.get("model", {}))
    cfg = RunConfig(
        model=validate_config(ModelConfig.from_dict(model)),
        data=_from_dict(DataConfig, {**_to_dict(base.data), **d.get("data", {})}, "data"),
        stage1=_from_dict(StagePlan, {**_to_dict(base.stage1), **d.get("stage1", {})}, "stage1").validate(),
        stage2=_from_dict(StagePlan, {**_to_dict(base.stage2), **d.get("stage2", {})}, "stage2").validate(),
        restore=_from_dict(RestorePlan, {**_to_dict(base.restore), **d.get("restore", {})}, "restore"),
        loss=_from_dict(LossWeights, {**_to_dict(base.loss), **d.get("loss", {})}, "loss"),
        ratios={str(k): float(v) for k, v in d.get("ratios", {}).items()},
        seed=int(d.get("seed", base.seed)),
        preset=preset,
    )
    if "seed" in d:
        cfg = cfg.with_seed(cfg.seed)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(d)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
