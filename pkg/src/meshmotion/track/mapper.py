"""Per-channel affine projection of baked vertex features toward the video feature space."""

from __future__ import annotations

import torch
from torch import nn


class FeatureMapper(nn.Module):
    """f -> scale * f + bias, identity at initialization."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(channels, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(channels, dtype=torch.float64))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return feats * self.scale + self.bias
