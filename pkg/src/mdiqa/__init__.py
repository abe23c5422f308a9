"""Multi-dimensional image quality assessment with tunable restoration losses."""
from .registry import AESTHETIC, TECHNICAL, ConfigError, DimensionRegistry, ModelConfig, default_registry
from .config import RunConfig, desk_scale, full_scale, load_config
from .aggregate import MDIQA, QualityOutput, forward_full
from .losses import hybrid_iqa_loss, nin_loss, nr_loss, fr_loss
from .metrics import plcc, srcc, evaluate

__version__ = "0.1.0"

__all__ = [
    "AESTHETIC",
    "TECHNICAL",
    "ConfigError",
    "DimensionRegistry",
    "ModelConfig",
    "default_registry",
    "RunConfig",
    "desk_scale",
    "full_scale",
    "load_config",
    "MDIQA",
    "QualityOutput",
    "forward_full",
    "hybrid_iqa_loss",
    "nin_loss",
    "nr_loss",
    "fr_loss",
    "plcc",
    "srcc",
    "evaluate",
]
