"""Contrastive identity disentanglement.

A shared multi-head attention block maps every latent level ``C`` to an
attribute code ``A``; the identity code is the residual ``I = C - A``.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn

from .errors import NumericError, ShapeError
from .latent_codec import LatentPyramid


class DisentangledCodes(NamedTuple):
    attribute: LatentPyramid
    identity: LatentPyramid


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic weights ``softmax(q k^T / sqrt(d_k))``."""
    d_k = q.shape[-1]
    if d_k <= 0:
        raise ShapeError("d_k must be positive")
    logits = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    return torch.softmax(logits, dim=-1)


def scaled_dot_product_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"K has {k.shape[-2]} rows but V has {v.shape[-2]}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("Q and K widths differ")
    for t in (q, k, v):
        if not torch.isfinite(t).all():
            raise NumericError("attention inputs must be finite")
    return attention_weights(q, k) @ v


class MultiHeadAttention(nn.Module):
    """Attention with ``h`` full-width heads and an ``(h*d) x d`` output projection.

    All heads share ``W_Q``, ``W_K`` and ``W_V`` (each ``d x d``); their
    outputs are concatenated along the feature axis before ``W_O``.
    """

    def __init__(self, d: int, heads: int = 4):
        super().__init__()
        if heads < 1:
            raise ValueError("head count must be >= 1")
        self.d = d
        self.heads = heads
        std = 1 / math.sqrt(d)
        self.w_q = nn.Parameter(torch.randn(d, d) * std)
        self.w_k = nn.Parameter(torch.randn(d, d) * std)
        self.w_v = nn.Parameter(torch.randn(d, d) * std)
        self.w_o = nn.Parameter(torch.randn(heads * d, d) / math.sqrt(heads * d))

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return multi_head_attention(c, self.w_q, self.w_k, self.w_v, self.w_o, self.heads)


def multi_head_attention(c, w_q, w_k, w_v, w_o, heads: int) -> torch.Tensor:
    d = c.shape[-1]
    for name, w in (("W_Q", w_q), ("W_K", w_k), ("W_V", w_v)):
        if tuple(w.shape) != (d, d):
            raise ShapeError(f"{name} must be {d}x{d}, got {tuple(w.shape)}")
    if tuple(w_o.shape) != (heads * d, d):
        raise ShapeError(f"W_O must be {heads * d}x{d}, got {tuple(w_o.shape)}")
    q, k, v = c @ w_q, c @ w_k, c @ w_v
    head = scaled_dot_product_attention(q, k, v)
    return torch.cat([head] * heads, dim=-1) @ w_o


class CID(nn.Module):
    def __init__(self, d: int, heads: int = 4):
        super().__init__()
        self.mha = MultiHeadAttention(d, heads)

    def attribute(self, level: torch.Tensor) -> torch.Tensor:
        return self.mha(level)

    def forward(self, codes: LatentPyramid) -> DisentangledCodes:
        return disentangle(codes, self.attribute)


class MLPDisentangler(nn.Module):
    """Four-layer perceptron replacement for the attention block (ablation)."""

    def __init__(self, d: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d
        self.net = nn.Sequential(
            nn.Linear(d, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, d),
        )

    def attribute(self, level: torch.Tensor) -> torch.Tensor:
        return self.net(level)

    def forward(self, codes: LatentPyramid) -> DisentangledCodes:
        return disentangle(codes, self.attribute)


def disentangle(codes: LatentPyramid, attribute_fn) -> DisentangledCodes:
    """Split each level independently: ``A = f(C)``, ``I = C - A``.

    ``attribute_fn`` is a module such as :class:`MultiHeadAttention`.
    """
    codes.check()
    attribute = codes.map(attribute_fn)
    identity = LatentPyramid(*(c - a for c, a in zip(codes, attribute)))
    return DisentangledCodes(attribute, identity)


def recombine(identity_of: DisentangledCodes, attribute_of: DisentangledCodes) -> LatentPyramid:
    """Identity codes of one image plus attribute codes of another."""
    return identity_of.identity + attribute_of.attribute
