"""Per-dimension heads: cross-scale attention, semantic injection and regression."""
from __future__ import annotations

import math
from typing import Callable, Dict, Optional, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .backbone import ShapeError, kaiming_init
from .registry import ConfigError


class CSAM(nn.Module):
    """Top-down cross-scale attention.

    The coarsest level seeds the fused map; at each finer level the current
    map supplies queries and that level supplies keys/values, and the attended
    values are added back residually.
    """

    def __init__(self, in_channels: Sequence[int], width: int):
        super().__init__()
        self.width = width
        self.proj = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_channels)
        n = len(in_channels) - 1
        self.q = nn.ModuleList(nn.Linear(width, width) for _ in range(n))
        self.k = nn.ModuleList(nn.Linear(width, width) for _ in range(n))
        self.v = nn.ModuleList(nn.Linear(width, width) for _ in range(n))

    def forward(self, levels, return_attn=False):
        sizes = {tuple(x.shape[-2:]) for x in levels}
        if len(sizes) != 1:
            raise ShapeError(f"CSAM needs spatially unified levels, got sizes {sorted(sizes)}")
        b, _, h, w = levels[-1].shape
        tok = lambda t: t.flatten(2).transpose(1, 2)  # (B, hw, C)
        f = tok(self.proj[-1](levels[-1]))
        attns = []
        for i in reversed(range(len(levels) - 1)):
            x = tok(self.proj[i](levels[i]))
            q, k, v = self.q[i](f), self.k[i](x), self.v[i](x)
            a = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.width), dim=-1)
            f = f + a @ v
            attns.append(a)
        out = f.transpose(1, 2).reshape(b, self.width, h, w)
        return (out, attns) if return_attn else out


class SemanticInjection(nn.Module):
    """``fused + MLP(concat(fused, sem))`` applied position-wise."""

    def __init__(self, width: int, sem_width: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or width
        self.mlp = nn.Sequential(
            nn.Conv2d(width + sem_width, hidden, 1), nn.GELU(), nn.Conv2d(hidden, width, 1))
        # starts as the identity so stage-one heads are untouched when injection switches on
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, fused, sem, enabled=True):
        if not enabled:
            return fused
        if sem is None:
            raise ConfigError("semantic injection enabled but no semantic feature given")
        s = sem[:, :, None, None].expand(-1, -1, *fused.shape[-2:])
        return fused + self.mlp(torch.cat([fused, s], dim=1))


class DimensionRegressor(nn.Module):
    def __init__(self, width: int, feature_width: int):
        super().__init__()
        self.hidden = nn.Linear(width, feature_width)
        self.out = nn.Linear(feature_width, 1)

    def forward(self, refined):
        g = F.gelu(self.hidden(refined.mean(dim=(2, 3))))
        return self.out(g).squeeze(-1), g


class DimensionHead(nn.Module):
    def __init__(self, in_channels, width, feature_width, sem_width):
        super().__init__()
        self.csam = CSAM(in_channels, width)
        self.injection = SemanticInjection(width, sem_width)
        self.regressor = DimensionRegressor(width, feature_width)

    def forward(self, levels, sem=None, inject=False):
        x = self.injection(self.csam(levels), sem, enabled=inject)
        return self.regressor(x)


class ToySemanticEncoder(nn.Module):
    """Small frozen conv encoder standing in for a CLIP visual tower."""

    def __init__(self, width: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 4, stride=4), nn.GELU(),
            nn.Conv2d(16, 32, 2, stride=2), nn.GELU(),
        )
        kaiming_init(self.net)
        self.fc = nn.Linear(32, width)

    def forward(self, x):
        return self.fc(self.net((x - 0.5) / 0.25).mean(dim=(2, 3)))


SEMANTIC_ENCODERS: Dict[str, Callable[[int], nn.Module]] = {"toy": ToySemanticEncoder}


def register_semantic_encoder(name: str, factory: Callable[[int], nn.Module]) -> None:
    """Register ``factory(width) -> module`` mapping images in [0,1] to (B, width)."""
    SEMANTIC_ENCODERS[name] = factory


class SemanticEncoder(nn.Module):
    """Frozen wrapper that unit-normalizes the wrapped encoder's output."""

    def __init__(self, name: str, width: int):
        super().__init__()
        if name not in SEMANTIC_ENCODERS:
            raise ConfigError(f"semantic encoder {name!r} is not registered; "
                              f"known: {sorted(SEMANTIC_ENCODERS)}")
        self.name = name
        self.encoder = SEMANTIC_ENCODERS[name](width)
        self.requires_grad_(False)

    def train(self, mode=True):
        # always inference mode
        return super().train(False)

    def forward(self, x):
        # parameters are frozen; gradients still reach the input pixels
        return F.normalize(self.encoder(x), dim=-1, eps=1e-12)
