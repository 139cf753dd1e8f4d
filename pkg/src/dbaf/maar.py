"""Multi-scale attentional attribute retention.

Each encoder feature map is projected to width ``d`` and reweighted by a
channel attention map and a spatial attention map, both in ``(0, 1)``.
Maps here are channel-first ``(B, C, k, k)``; the perceptrons act
pointwise on the channel vector at every position with shared weights.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn

from .errors import ShapeError
from .latent_codec import FeaturePyramid


def project(m: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Channel projection ``M W`` for ``M`` of shape (B, d_i, k, k) and ``W`` (d_i, d)."""
    if m.dim() != 4 or m.shape[1] != w.shape[0]:
        raise ShapeError(f"feature map {tuple(m.shape)} does not match projection {tuple(w.shape)}")
    return torch.einsum("bchw,cd->bdhw", m, w)


def _pointwise(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    # weight: (in, out) applied along the channel axis
    return torch.einsum("bchw,co->bohw", x, weight) + bias[None, :, None, None]


def channel_attention(mw: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Channel attention weights from the projected map ``mw`` (B, d, k, k)."""
    d = mw.shape[1]
    pooled_max = mw.amax(dim=1, keepdim=True).expand(-1, d, -1, -1)
    pooled_avg = mw.mean(dim=1, keepdim=True).expand(-1, d, -1, -1)
    return torch.sigmoid(_pointwise(pooled_max + pooled_avg, weight, bias))


def spatial_attention(m_prime: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Spatial attention weights; ``weight`` is (2d, d) over ``[max, avg]``."""
    k1, k2 = m_prime.shape[-2:]
    pooled_max = m_prime.amax(dim=(2, 3), keepdim=True).expand(-1, -1, k1, k2)
    pooled_avg = m_prime.mean(dim=(2, 3), keepdim=True).expand(-1, -1, k1, k2)
    return torch.sigmoid(_pointwise(torch.cat([pooled_max, pooled_avg], dim=1), weight, bias))


class MAAR(nn.Module):
    def __init__(self, feature_channels: Sequence[int], d: int):
        super().__init__()
        self.d = d
        self.proj = nn.ParameterList(
            nn.Parameter(torch.randn(c, d) / math.sqrt(c)) for c in feature_channels
        )
        self.ca_weight = nn.Parameter(torch.randn(d, d) / math.sqrt(d))
        self.ca_bias = nn.Parameter(torch.zeros(d))
        self.sa_weight = nn.Parameter(torch.randn(2 * d, d) / math.sqrt(2 * d))
        self.sa_bias = nn.Parameter(torch.zeros(d))

    def enhance_level(self, m: torch.Tensor, level: int) -> torch.Tensor:
        mw = project(m, self.proj[level])
        m_prime = channel_attention(mw, self.ca_weight, self.ca_bias)
        m_bar = spatial_attention(m_prime, self.sa_weight, self.sa_bias)
        return m_bar * m_prime * mw

    def forward(self, features: FeaturePyramid) -> FeaturePyramid:
        return tuple(self.enhance_level(m, i) for i, m in enumerate(features))


class ChannelProjection(nn.Module):
    """Plain ``M W`` per level; stands in for MAAR when it is ablated."""

    def __init__(self, feature_channels: Sequence[int], d: int):
        super().__init__()
        self.proj = nn.ParameterList(
            nn.Parameter(torch.randn(c, d) / math.sqrt(c)) for c in feature_channels
        )

    def forward(self, features: FeaturePyramid) -> FeaturePyramid:
        return tuple(project(m, w) for m, w in zip(features, self.proj))


def enhance(features: FeaturePyramid, params: MAAR) -> FeaturePyramid:
    return params(features)
