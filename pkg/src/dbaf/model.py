"""The assembled generator (backbone + CID + MAAR + KRIA), discriminator, and
the anonymize / recover entry points."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cid import CID, MLPDisentangler, recombine
from .errors import ConfigurationError, StateError, ValidationError
from .kria import KRIA, AnonKey, keyed_transform
from .latent_codec import (BackboneConfig, EqualConv2d, EqualLinear, LatentPyramid, ToyBackbone, seeded,
                           validate_adapter)
from .maar import MAAR, ChannelProjection

ABLATIONS = ("full", "single_stage", "no_cid", "no_maar")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: int = 4
    ablation: str = "full"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig.from_dict(self.backbone)
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"unknown ablation mode {self.ablation!r}; expected one of {ABLATIONS}")
        if self.heads < 1:
            raise ConfigurationError("head count must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d


class DBAF(nn.Module):
    """Generator side of the two-stage de-identification model.

    ``stage_completed`` records how far training has progressed; the public
    :func:`anonymize` / :func:`recover` refuse models whose keyed mapping has
    not been trained.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        bcfg = self.config.backbone
        d = bcfg.d
        self.backbone = ToyBackbone(bcfg)
        with seeded(self.config.seed):
            if self.config.ablation == "no_cid":
                self.cid = MLPDisentangler(d)
            else:
                self.cid = CID(d, self.config.heads)
            if self.config.ablation == "no_maar":
                self.maar = ChannelProjection(bcfg.feature_channels, d)
            else:
                self.maar = MAAR(bcfg.feature_channels, d)
            self.kria = KRIA(d)
        self.register_buffer("stage_completed", torch.zeros((), dtype=torch.long))

    @property
    def d(self) -> int:
        return self.config.backbone.d

    def register_backbone(self, adapter):
        """Route encode/decode through ``adapter``; returns the adapter."""
        validate_adapter(adapter, self.config.backbone)
        if "backbone" in self._modules:
            del self._modules["backbone"]
        self.backbone = adapter
        return adapter

    # -- building blocks --
    def encode(self, images):
        latents, features = self.backbone.encode(images)
        return self.cid(latents), features

    def render(self, codes: LatentPyramid, features) -> torch.Tensor:
        return self.backbone.decode(codes, self.maar(features))

    # -- stage 1 --
    def mix(self, x_attr: torch.Tensor, x_id: torch.Tensor):
        """Identity of ``x_id`` on the attributes of ``x_attr``.

        Returns ``(image, recombined codes)``.
        """
        attr_codes, attr_feats = self.encode(x_attr)
        id_codes, _ = self.encode(x_id)
        codes = recombine(id_codes, attr_codes)
        return self.render(codes, attr_feats), codes

    # -- stage 2 --
    def transform(self, images: torch.Tensor, key) -> torch.Tensor:
        """The keyed mapping used for both anonymization and recovery."""
        codes, feats = self.encode(images)
        out = codes.attribute + keyed_transform(codes.identity, key, self.kria)
        return self.render(out, feats)


class Discriminator(nn.Module):
    """Small residual convnet returning one logit per image."""

    def __init__(self, image_size: int = 64, channels: int = 32, seed: int = 0):
        super().__init__()
        with seeded(seed):
            layers = [EqualConv2d(3, channels, 1)]
            c = channels
            r = image_size
            while r > 4:
                nc = min(c * 2, 128)
                layers.append(EqualConv2d(c, nc, 3, stride=2))
                c, r = nc, r // 2
            self.convs = nn.ModuleList(layers)
            self.fc = EqualLinear(c * 16, c, activation=True)
            self.out = EqualLinear(c, 1)

    def forward(self, x):
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2) * math.sqrt(2)
        return self.out(self.fc(x.flatten(1))).squeeze(1)


def _ready(model: DBAF) -> None:
    if model is None:
        raise StateError("no model loaded")
    trained = int(model.stage_completed)
    if trained < 2:
        raise StateError("model has no trained anonymization stage; load a stage-2 checkpoint")


def _as_batch(image: torch.Tensor):
    return (image.unsqueeze(0), True) if image.dim() == 3 else (image, False)


@torch.no_grad()
def anonymize(image: torch.Tensor, key: AnonKey, model: DBAF) -> torch.Tensor:
    """Replace the identity in ``image`` under ``key``; accepts (3,H,W) or batches."""
    _ready(model)
    x, single = _as_batch(image)
    was_training = model.training
    model.eval()
    try:
        out = model.transform(x, key)
    finally:
        model.train(was_training)
    return out[0] if single else out


@torch.no_grad()
def recover(image: torch.Tensor, key: AnonKey, model: DBAF) -> torch.Tensor:
    """Same mapping as :func:`anonymize`; with the original key it restores the identity."""
    return anonymize(image, key, model)
