"""Shared multi-scale backbones with gated local pooling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import torch
from torch import nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


def kaiming_init(module: nn.Module) -> nn.Module:
    """He-normal conv weights, zero biases: keeps activation scale through unnormalized stacks."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


@dataclass
class FeaturePyramid:
    levels: List[torch.Tensor]  # (B, C_l, h, w), finest first
    branch: str

    @property
    def size(self):
        return tuple(self.levels[-1].shape[-2:])


class GLP(nn.Module):
    """Gated local pooling: ``avgpool(x * sigmoid(conv1x1(x)))`` to a target size."""

    def __init__(self, channels):
        super().__init__()
        self.gate = nn.Conv2d(channels, channels, 1)

    def gate_values(self, x):
        return torch.sigmoid(self.gate(x))

    def forward(self, x, target):
        target = tuple(int(t) for t in target)
        h, w = x.shape[-2:]
        if target[0] > h or target[1] > w:
            raise ShapeError(f"GLP target {target} exceeds input size {(h, w)}")
        # adaptive windows cover the non-divisible case
        return F.adaptive_avg_pool2d(x * self.gate_values(x), target)


class Backbone(nn.Module):
    def __init__(self, widths: Sequence[int], strides: Sequence[int], stem_width: int = 16,
                 branch: str = "technical"):
        super().__init__()
        self.branch = branch
        self.strides = tuple(strides)
        # lossless 2x space-to-depth keeps pixel-level detail at half the cost
        self.stem = nn.Sequential(
            nn.PixelUnshuffle(2),
            nn.Conv2d(12, stem_width, 3, padding=1), nn.GELU(),
            nn.Conv2d(stem_width, stem_width, 3, padding=1), nn.GELU(),
        )
        stages = []
        cin, prev = stem_width, 2
        for w, s in zip(widths, strides):
            k = s // prev
            stages.append(nn.Sequential(
                nn.Conv2d(cin, w, k, stride=k), nn.GELU(),
                nn.Conv2d(w, w, 3, padding=1), nn.GELU(),
            ))
            cin, prev = w, s
        self.stages = nn.ModuleList(stages)
        kaiming_init(self)
        self.glp = nn.ModuleList(GLP(w) for w in widths)
        self.widths = tuple(widths)

    @property
    def min_size(self):
        return max(32, 2 * self.strides[-1])

    def features(self, x) -> List[torch.Tensor]:
        h, w = x.shape[-2:]
        if min(h, w) < self.min_size:
            raise ShapeError(f"input {h}x{w} is below the backbone minimum of "
                             f"{self.min_size}x{self.min_size}")
        x = self.stem((x - 0.5) / 0.25)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out

    def forward(self, x) -> FeaturePyramid:
        feats = self.features(x)
        target = feats[-1].shape[-2:]
        return FeaturePyramid([g(f, target) for g, f in zip(self.glp, feats)], self.branch)
