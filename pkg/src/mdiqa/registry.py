"""Dimension taxonomy and model configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Tuple

TECHNICAL = ("sharpness", "noisiness", "brightness", "contrast", "colorfulness")
AESTHETIC = ("composition", "light", "color", "content")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DimensionRegistry:
    technical: Tuple[str, ...] = TECHNICAL
    aesthetic: Tuple[str, ...] = AESTHETIC

    def __post_init__(self):
        object.__setattr__(self, "technical", tuple(self.technical))
        object.__setattr__(self, "aesthetic", tuple(self.aesthetic))
        names = self.technical + self.aesthetic
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate dimension names: {dup}")

    @property
    def names(self) -> Tuple[str, ...]:
        return self.technical + self.aesthetic

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.names

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown dimension {name!r}; known: {list(self.names)}") from None

    def group(self, name: str) -> str:
        if name in self.technical:
            return "technical"
        if name in self.aesthetic:
            return "aesthetic"
        raise KeyError(f"unknown dimension {name!r}")

    def subset(self, technical: bool = True, aesthetic: bool = True) -> "DimensionRegistry":
        return DimensionRegistry(self.technical if technical else (),
                                 self.aesthetic if aesthetic else ())


def default_registry() -> DimensionRegistry:
    return DimensionRegistry(TECHNICAL, AESTHETIC)


@dataclass
class ModelConfig:
    """Architecture widths, ablation flags and seeds.

    ``backbone_widths``/``backbone_strides`` define the pyramid: one level per
    entry, so ``L = len(backbone_strides)``.
    """
    technical: Tuple[str, ...] = TECHNICAL
    aesthetic: Tuple[str, ...] = AESTHETIC
    backbone_widths: Tuple[int, ...] = (32, 64, 128)
    backbone_strides: Tuple[int, ...] = (4, 8, 16)
    stem_width: int = 16
    head_width: int = 32
    feature_width: int = 32
    semantic_width: int = 64
    semantic_encoder: str = "toy"
    weight_width: int = 16
    fusion_hidden: int = 32
    fusion_mode: str = "scalar"
    use_weight_branch: bool = True
    finetune_regressor: bool = True
    use_semantic_features: bool = True
    use_technical: bool = True
    use_aesthetic: bool = True
    crop: int = 384
    seed: int = 0

    @property
    def levels(self) -> int:
        return len(self.backbone_strides)

    def registry(self) -> DimensionRegistry:
        return DimensionRegistry(self.technical, self.aesthetic).subset(
            self.use_technical, self.use_aesthetic)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """Return a normalized copy of ``cfg`` or raise ConfigError."""
    cfg = replace(cfg, technical=tuple(cfg.technical), aesthetic=tuple(cfg.aesthetic),
                  backbone_widths=tuple(cfg.backbone_widths),
                  backbone_strides=tuple(cfg.backbone_strides))
    if not (cfg.use_technical or cfg.use_aesthetic):
        raise ConfigError("no dimensions enabled")
    DimensionRegistry(cfg.technical, cfg.aesthetic)
    if cfg.use_technical and not cfg.technical:
        raise ConfigError("use_technical is set but the technical dimension list is empty")
    if cfg.use_aesthetic and not cfg.aesthetic:
        raise ConfigError("use_aesthetic is set but the aesthetic dimension list is empty")
    if cfg.levels < 2:
        raise ConfigError(f"need at least 2 pyramid levels, got {cfg.levels}")
    if len(cfg.backbone_widths) != cfg.levels:
        raise ConfigError("backbone_widths and backbone_strides must have equal length")
    if cfg.backbone_strides[0] < 4 or cfg.backbone_strides[0] % 2:
        raise ConfigError("the first stride must be an even number >= 4")
    prev = 2
    for s in cfg.backbone_strides:
        if s <= prev or s % prev:
            raise ConfigError(f"strides must be strictly increasing multiples: {cfg.backbone_strides}")
        prev = s
    if cfg.fusion_mode not in ("scalar", "feature"):
        raise ConfigError(f"fusion_mode must be 'scalar' or 'feature', got {cfg.fusion_mode!r}")
    for name in ("stem_width", "head_width", "feature_width", "semantic_width",
                 "weight_width", "fusion_hidden", "crop"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    return cfg
