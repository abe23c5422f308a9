"""Image-adaptive weighting, score fusion and the end-to-end MDIQA model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .backbone import Backbone, FeaturePyramid, kaiming_init
from .heads import DimensionHead, SemanticEncoder
from .registry import ConfigError, DimensionRegistry, ModelConfig, validate_config


@dataclass
class QualityOutput:
    dim_scores: torch.Tensor    # (B, n)
    dim_features: torch.Tensor  # (B, n, feature_width), the per-dimension g_D
    weights: torch.Tensor       # (B, n), after any ratio override
    overall: torch.Tensor       # (B,)
    names: tuple = ()

    def to_json(self, index: int = 0) -> dict:
        """Per-image readout ``{overall, weights: {name: v}, dims: {name: v}}``."""
        s = self.dim_scores[index].detach().double().tolist()
        w = self.weights[index].detach().double().tolist()
        return {
            "overall": float(self.overall[index]),
            "weights": dict(zip(self.names, w)),
            "dims": dict(zip(self.names, s)),
        }


class WeightBranch(nn.Module):
    """Strided convs, global pooling, linear and softplus: one positive weight per dimension."""

    def __init__(self, n_dims: int, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=4), nn.GELU(),
            nn.Conv2d(width, 2 * width, 2, stride=2), nn.GELU(),
            nn.Conv2d(2 * width, 2 * width, 2, stride=2), nn.GELU(),
        )
        kaiming_init(self.net)
        self.fc = nn.Linear(2 * width, n_dims)
        # softplus(0.5413) == 1, so untrained weights start near the unweighted baseline
        nn.init.zeros_(self.fc.weight)
        nn.init.constant_(self.fc.bias, 0.5413)

    def forward(self, x):
        return F.softplus(self.fc(self.net((x - 0.5) / 0.25).mean(dim=(2, 3))))


class MLP3(nn.Module):
    def __init__(self, n_in: int, hidden: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(n_in, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, x):
        return self.layers(x).squeeze(-1)


def fusion_input(scores, features, weights, mode="scalar"):
    """The MLP input: ``w * s`` (scalar mode) or ``concat_D(w_D * g_D)`` (feature mode)."""
    if mode == "scalar":
        return weights * scores
    if mode == "feature":
        if features is None:
            raise ValueError("feature fusion needs dimension features")
        return (weights.unsqueeze(-1) * features).flatten(1)
    raise ValueError(f"unknown fusion mode {mode!r}")


def ratio_vector(override: Optional[Mapping[str, float]], names, dtype=torch.float32):
    lam = torch.ones(len(names), dtype=dtype)
    for name, v in (override or {}).items():
        if name not in names:
            raise KeyError(f"unknown dimension {name!r} in ratio override; known: {list(names)}")
        if not v > 0:
            raise ValueError(f"ratio for {name} must be positive, got {v}")
        lam[list(names).index(name)] = float(v)
    return lam


class MDIQA(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg = validate_config(cfg)
        self.cfg = cfg
        self.registry: DimensionRegistry = cfg.registry()
        self.names = self.registry.names
        n = len(self.names)
        torch.manual_seed(cfg.seed)
        self.backbones = nn.ModuleDict()
        for branch, on in (("technical", cfg.use_technical), ("aesthetic", cfg.use_aesthetic)):
            if on:
                self.backbones[branch] = Backbone(cfg.backbone_widths, cfg.backbone_strides,
                                                  cfg.stem_width, branch)
        self.heads = nn.ModuleDict({
            name: DimensionHead(cfg.backbone_widths, cfg.head_width, cfg.feature_width,
                                cfg.semantic_width)
            for name in self.names
        })
        self.weight_branch = WeightBranch(n, cfg.weight_width)
        fin = n if cfg.fusion_mode == "scalar" else n * cfg.feature_width
        self.fusion = MLP3(fin, cfg.fusion_hidden)
        self.semantic_encoder = None
        if cfg.use_semantic_features:
            with torch.random.fork_rng():
                torch.manual_seed(cfg.seed + 1)
                self.semantic_encoder = SemanticEncoder(cfg.semantic_encoder, cfg.semantic_width)
        # stage one trains without injection; stage two switches it on
        self.inject = False

    # -- parameter groups used by the staged trainer
    def param_groups(self) -> Dict[str, List[nn.Parameter]]:
        g = {k: [] for k in ("backbone.technical", "backbone.aesthetic", "heads.csam",
                             "heads.injection", "heads.regressor", "weight_branch", "fusion",
                             "semantic_encoder")}
        for b, m in self.backbones.items():
            g[f"backbone.{b}"] += list(m.parameters())
        for h in self.heads.values():
            g["heads.csam"] += list(h.csam.parameters())
            g["heads.injection"] += list(h.injection.parameters())
            g["heads.regressor"] += list(h.regressor.parameters())
        g["weight_branch"] += list(self.weight_branch.parameters())
        g["fusion"] += list(self.fusion.parameters())
        if self.semantic_encoder is not None:
            g["semantic_encoder"] += list(self.semantic_encoder.parameters())
        return g

    def branch_dims(self, branch):
        return [n for n in self.names if self.registry.group(n) == branch]

    def encode_semantics(self, x):
        if self.semantic_encoder is None:
            raise ConfigError("no semantic encoder: set use_semantic_features and register one")
        return self.semantic_encoder(x)

    def pyramid(self, x, branch) -> FeaturePyramid:
        return self.backbones[branch](x)

    def dims(self, x, branches=None):
        """Head outputs ``(scores (B, n), features (B, n, d))``, registry order.

        ``branches`` restricts evaluation to some groups; skipped dims are zero.
        """
        branches = branches or list(self.backbones)
        sem = None
        if self.inject and self.cfg.use_semantic_features:
            sem = self.encode_semantics(x)
        b = x.shape[0]
        scores = [None] * len(self.names)
        feats = [None] * len(self.names)
        for branch in self.backbones:
            if branch not in branches:
                continue
            levels = self.pyramid(x, branch).levels
            for name in self.branch_dims(branch):
                i = self.names.index(name)
                scores[i], feats[i] = self.heads[name](levels, sem, inject=sem is not None)
        ref = next(s for s in scores if s is not None)
        fref = next(f for f in feats if f is not None)
        scores = [s if s is not None else ref.new_zeros(b) for s in scores]
        feats = [f if f is not None else fref.new_zeros(fref.shape) for f in feats]
        return torch.stack(scores, 1), torch.stack(feats, 1)

    def predict_weights(self, x):
        if not self.cfg.use_weight_branch:
            return x.new_ones(x.shape[0], len(self.names))
        return self.weight_branch(x)

    def fuse(self, scores, features, weights):
        return self.fusion(fusion_input(scores, features, weights, self.cfg.fusion_mode))

    def forward(self, x, override=None, weights=None) -> QualityOutput:
        scores, feats = self.dims(x)
        w = self.predict_weights(x) if weights is None else weights
        if override:
            w = w * ratio_vector(override, self.names, w.dtype).to(w.device)
        return QualityOutput(scores, feats, w, self.fuse(scores, feats, w), self.names)

    @torch.no_grad()
    def score_image(self, image, override=None) -> dict:
        was = self.training
        self.eval()
        x = torch.as_tensor(np.asarray(image), dtype=next(self.parameters()).dtype)[None]
        out = self(x, override=override)
        self.train(was)
        return out.to_json(0)


def forward_full(model: MDIQA, image) -> QualityOutput:
    """Inference-mode forward of one (3, H, W) image or a (B, 3, H, W) batch."""
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    if x.ndim == 3:
        x = x[None]
    x = x.to(next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        return model(x)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    model.requires_grad_(False)
    return model
