"""Encoder/decoder backbone producing and consuming the latent pyramid.

Tensors are channel-first and batched: images are ``(B, 3, H, W)`` in
``[-1, 1]``, latent levels are ``(B, rows, d)`` and feature maps are
``(B, channels, k, k)``.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple, Protocol, Sequence, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError, ShapeError

LEVEL_ROWS = (4, 4, 6)
N_STYLES = sum(LEVEL_ROWS)


class LatentPyramid(NamedTuple):
    """Coarse / medium / fine latent codes, each ``(..., rows, d)``."""

    coarse: torch.Tensor
    medium: torch.Tensor
    fine: torch.Tensor

    @classmethod
    def from_stack(cls, codes: torch.Tensor) -> "LatentPyramid":
        if codes.shape[-2] != N_STYLES:
            raise ShapeError(f"expected {N_STYLES} style rows, got {tuple(codes.shape)}")
        return cls(*torch.split(codes, LEVEL_ROWS, dim=-2))

    def stack(self) -> torch.Tensor:
        return torch.cat(tuple(self), dim=-2)

    def map(self, fn) -> "LatentPyramid":
        return LatentPyramid(*(fn(level) for level in self))

    @property
    def width(self) -> int:
        return self.coarse.shape[-1]

    def check(self, d: int | None = None) -> "LatentPyramid":
        for level, rows in zip(self, LEVEL_ROWS):
            if level.shape[-2] != rows:
                raise ShapeError(f"level has {level.shape[-2]} rows, expected {rows}")
            if level.shape[-1] != self.width or (d is not None and level.shape[-1] != d):
                raise ShapeError("latent levels disagree on code width")
        return self

    def __add__(self, other):  # type: ignore[override]
        _same_shapes(self, other)
        return LatentPyramid(*(a + b for a, b in zip(self, other)))

    def __sub__(self, other):
        _same_shapes(self, other)
        return LatentPyramid(*(a - b for a, b in zip(self, other)))


def _same_shapes(a: LatentPyramid, b: LatentPyramid) -> None:
    if not isinstance(b, LatentPyramid):
        raise TypeError("expected a LatentPyramid")
    for x, y in zip(a, b):
        if x.shape[-2:] != y.shape[-2:]:
            raise ShapeError(f"pyramid level shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")


# Three feature maps, coarsest first.
FeaturePyramid = tuple


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    d: int = 64
    feature_channels: tuple[int, int, int] = (128, 64, 32)
    feature_sizes: tuple[int, int, int] = (8, 16, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feature_channels", tuple(int(c) for c in self.feature_channels))
        object.__setattr__(self, "feature_sizes", tuple(int(k) for k in self.feature_sizes))
        s = self.image_size
        if s < 32 or s & (s - 1):
            raise ConfigurationError(f"image_size must be a power of two >= 32, got {s}")
        if self.d < 8:
            raise ConfigurationError(f"latent width d must be >= 8, got {self.d}")
        if len(self.feature_sizes) != 3 or len(self.feature_channels) != 3:
            raise ConfigurationError("exactly three feature levels are required")
        k = self.feature_sizes
        if not (k[0] < k[1] < k[2]):
            raise ConfigurationError(f"feature sizes must be strictly increasing, got {k}")
        if min(self.feature_channels) < 1:
            raise ConfigurationError("feature channels must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        return cls(**data)


@runtime_checkable
class BackboneAdapter(Protocol):
    """What a backbone must provide to be plugged into the pipeline."""

    config: BackboneConfig

    def encode(self, images: torch.Tensor) -> tuple[LatentPyramid, FeaturePyramid]: ...

    def decode(self, latents: LatentPyramid, features: Sequence[torch.Tensor]) -> torch.Tensor: ...


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def check_image(images: torch.Tensor, image_size: int | None = None) -> torch.Tensor:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h != w:
        raise ShapeError(f"images must be square, got {h}x{w}")
    if image_size is not None and h != image_size:
        raise ConfigurationError(f"image size {h} does not match configured {image_size}")
    if not torch.isfinite(images).all():
        raise NumericError("image contains non-finite values")
    return images


def check_features(features: Sequence[torch.Tensor], sizes: Sequence[int], channels: Sequence[int]) -> None:
    if len(features) != 3:
        raise ShapeError(f"expected 3 feature levels, got {len(features)}")
    for f, k, c in zip(features, sizes, channels):
        if f.dim() != 4 or tuple(f.shape[1:]) != (c, k, k):
            raise ShapeError(f"feature map {tuple(f.shape)} does not match ({c}, {k}, {k})")


# --- equalized-learning-rate layers -----------------------------------------

class EqualConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, stride=1, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        self.scale = 1 / math.sqrt(in_ch * kernel_size ** 2)
        self.stride = stride
        self.padding = kernel_size // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, stride=self.stride, padding=self.padding)


class EqualLinear(nn.Module):
    def __init__(self, in_dim, out_dim, bias=True, bias_init=0.0, lr_mul=1.0, activation=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init))) if bias else None
        self.scale = lr_mul / math.sqrt(in_dim)
        self.lr_mul = lr_mul
        self.activation = activation

    def forward(self, x):
        bias = self.bias * self.lr_mul if self.bias is not None else None
        out = F.linear(x, self.weight * self.scale, bias)
        if self.activation:
            out = F.leaky_relu(out, 0.2) * math.sqrt(2)
        return out


class ModulatedConv2d(nn.Module):
    """3x3 convolution whose input channels are scaled by a style vector, with demodulation."""

    def __init__(self, in_ch, out_ch, style_dim, kernel_size=3, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel_size, kernel_size))
        self.scale = 1 / math.sqrt(in_ch * kernel_size ** 2)
        self.affine = EqualLinear(style_dim, in_ch, bias_init=1.0)
        self.demodulate = demodulate
        self.padding = kernel_size // 2

    def forward(self, x, style):
        s = self.affine(style)  # (B, in)
        w = self.weight * self.scale
        out = F.conv2d(x * s[:, :, None, None], w, padding=self.padding)
        if self.demodulate:
            # sum_{in,k} (w * s)^2 per (batch, out channel)
            wsq = w.pow(2).sum(dim=(2, 3))  # (out, in)
            demod = torch.rsqrt(s.pow(2) @ wsq.t() + 1e-8)
            out = out * demod[:, :, None, None]
        return out


class StyledLayer(nn.Module):
    def __init__(self, in_ch, out_ch, style_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, style_dim)
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, style):
        out = self.conv(x, style) + self.bias[None, :, None, None]
        return F.leaky_relu(out, 0.2) * math.sqrt(2)


# --- toy backbone ------------------------------------------------------------

def _decoder_channels(d: int, res: int) -> int:
    return d if res <= 16 else max(16, d * 16 // res)


def _rows_per_block(n_blocks: int) -> list[int]:
    rest = N_STYLES - 2
    base, extra = divmod(rest, n_blocks - 1)
    return [2] + [base + (1 if i < extra else 0) for i in range(n_blocks - 1)]


class ToyEncoder(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        size, d = config.image_size, config.d
        chans = dict(zip(config.feature_sizes, config.feature_channels))
        res_list = []
        r = size // 2
        while r >= 4:
            res_list.append(r)
            r //= 2
        self.res_list = res_list
        first = chans.get(size // 2, 32)
        self.from_rgb = EqualConv2d(3, first, 3)
        downs = []
        in_ch = first
        self.out_channels = {}
        for r in res_list:
            out_ch = chans.get(r, min(128, max(in_ch, 32)))
            downs.append(EqualConv2d(in_ch, out_ch, 3, stride=2))
            self.out_channels[r] = out_ch
            in_ch = out_ch
        self.downs = nn.ModuleList(downs)
        missing = [k for k in config.feature_sizes if k not in self.out_channels]
        if missing:
            raise ConfigurationError(f"toy encoder cannot produce feature sizes {missing}")
        self.level_res = (4, config.feature_sizes[0], config.feature_sizes[1])
        self.heads = nn.ModuleList(
            EqualLinear(self.out_channels[r] * 4, rows * d) for r, rows in zip(self.level_res, LEVEL_ROWS)
        )

    def forward(self, images):
        x = F.leaky_relu(self.from_rgb(images), 0.2)
        maps = {}
        for r, down in zip(self.res_list, self.downs):
            x = F.leaky_relu(down(x), 0.2)
            maps[r] = x
        levels = []
        for r, rows, head in zip(self.level_res, LEVEL_ROWS, self.heads):
            pooled = F.adaptive_avg_pool2d(maps[r], 2).flatten(1)
            levels.append(head(pooled).view(-1, rows, self.config.d))
        features = tuple(maps[k] for k in self.config.feature_sizes)
        return LatentPyramid(*levels), features


class StyleDecoder(nn.Module):
    """Style-modulated convolutional generator driven by the 14 latent rows.

    Enhanced feature maps (width ``d``) are added to the intermediate
    activations at their matching resolution after the first layer of the
    block.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.d
        self.resolutions = [4 * 2 ** i for i in range(int(math.log2(config.image_size // 4)) + 1)]
        rows = _rows_per_block(len(self.resolutions))
        self.const = nn.Parameter(torch.randn(1, _decoder_channels(d, 4), 4, 4))
        blocks = []
        in_ch = _decoder_channels(d, 4)
        for res, n in zip(self.resolutions, rows):
            out_ch = _decoder_channels(d, res)
            layers = [StyledLayer(in_ch, out_ch, d)] + [StyledLayer(out_ch, out_ch, d) for _ in range(n - 1)]
            blocks.append(nn.ModuleList(layers))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.rows = rows
        self.inject = nn.ModuleDict(
            {str(k): EqualConv2d(d, _decoder_channels(d, k), 1) for k in config.feature_sizes}
        )
        self.to_rgb = EqualConv2d(in_ch, 3, 1)

    def forward(self, styles, features):
        batch = styles.shape[0]
        feats = {k: f for k, f in zip(self.config.feature_sizes, features)}
        x = self.const.expand(batch, -1, -1, -1)
        row = 0
        for res, layers in zip(self.resolutions, self.blocks):
            if res > 4:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            for i, layer in enumerate(layers):
                x = layer(x, styles[:, row])
                row += 1
                if i == 0 and res in feats:
                    x = x + self.inject[str(res)](feats[res])
        return self.to_rgb(x)


class ToyBackbone(nn.Module):
    """Small trainable stand-in for an inversion encoder + style generator."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        with seeded(self.config.seed):
            self.encoder = ToyEncoder(self.config)
            self.decoder = StyleDecoder(self.config)

    def encode(self, images: torch.Tensor) -> tuple[LatentPyramid, FeaturePyramid]:
        check_image(images, self.config.image_size)
        return self.encoder(images)

    def decode(self, latents: LatentPyramid, features: Sequence[torch.Tensor]) -> torch.Tensor:
        """Render images from latents and width-``d`` feature maps; output clamped to [-1, 1]."""
        latents.check(self.config.d)
        check_features(features, self.config.feature_sizes, (self.config.d,) * 3)
        out = self.decoder(latents.stack(), features)
        return out.clamp(-1.0, 1.0)


def validate_adapter(adapter, expected: BackboneConfig) -> None:
    if not callable(getattr(adapter, "encode", None)) or not callable(getattr(adapter, "decode", None)):
        raise ConfigurationError("backbone adapter must implement encode() and decode()")
    cfg = getattr(adapter, "config", None)
    if cfg is None:
        raise ConfigurationError("backbone adapter must expose a BackboneConfig as .config")
    if cfg.d != expected.d:
        raise ConfigurationError(f"adapter latent width {cfg.d} != model width {expected.d}")
    if tuple(cfg.feature_sizes) != tuple(expected.feature_sizes):
        raise ConfigurationError(f"adapter feature sizes {cfg.feature_sizes} != {expected.feature_sizes}")
    if tuple(cfg.feature_channels) != tuple(expected.feature_channels):
        raise ConfigurationError(
            f"adapter feature channels {cfg.feature_channels} != {expected.feature_channels}"
        )
    if cfg.image_size != expected.image_size:
        raise ConfigurationError(f"adapter image size {cfg.image_size} != {expected.image_size}")
