"""Loss terms for both training stages, frozen feature extractors, and loss reports."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ValidationError
from .latent_codec import LatentPyramid, seeded

TAU_PLUS = 0.3
TAU_MINUS = 1.2
R1_GAMMA = 10.0


# --- extractors ----------------------------------------------------------------

class Extractor(nn.Module):
    """Frozen image -> embedding network; ``kind`` is identity, perceptual or parsing."""

    kinds = ("identity", "perceptual", "parsing")

    def __init__(self, kind: str, embedding_width: int):
        super().__init__()
        if kind not in self.kinds:
            raise ValidationError(f"unknown extractor kind {kind!r}")
        self.kind = kind
        self.embedding_width = embedding_width

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def freeze(self) -> "Extractor":
        self.requires_grad_(False)
        self.eval()
        return self


class ToyIdentityExtractor(Extractor):
    """Random bias-free tanh convnet on mean-centred images.

    Being an odd function of the centred input, its embeddings are not
    dominated by a shared positive component, so cosines spread over
    [-1, 1] across different faces.
    """

    def __init__(self, width: int = 128, channels: int = 32):
        super().__init__("identity", width)
        c = channels
        self.convs = nn.ModuleList([
            nn.Conv2d(3, c, 3, stride=2, padding=1, bias=False),
            nn.Conv2d(c, c, 3, stride=2, padding=1, bias=False),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1, bias=False),
        ])
        self.head = nn.Linear(2 * c * 16, width, bias=False)

    def forward(self, x):
        x = x - x.mean(dim=(2, 3), keepdim=True)
        for conv in self.convs:
            x = torch.tanh(conv(x) * 2.0)
        return self.head(F.adaptive_avg_pool2d(x, 4).flatten(1))


class ToyPerceptualExtractor(Extractor):
    """Multi-scale random conv features, unit-normalised per position (LPIPS-like)."""

    def __init__(self, channels: int = 16, pool: int = 4):
        self.pool = pool
        super().__init__("perceptual", 3 * channels * pool * pool)
        c = channels
        self.convs = nn.ModuleList([
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
        ])

    def forward(self, x):
        outs = []
        for conv in self.convs:
            x = F.relu(conv(x))
            f = x / (x.pow(2).sum(dim=1, keepdim=True) + 1e-6).sqrt()
            outs.append(F.adaptive_avg_pool2d(f, self.pool).flatten(1))
        n = len(outs)
        return torch.cat(outs, dim=1) / math.sqrt(n)


class ToyParsingExtractor(Extractor):
    """Soft segmentation into a few region classes on a coarse grid."""

    def __init__(self, classes: int = 8, grid: int = 8, channels: int = 16):
        super().__init__("parsing", classes * grid * grid)
        self.grid = grid
        self.body = nn.Sequential(
            nn.Conv2d(3, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(channels, classes, 1),
        )

    def forward(self, x):
        logits = F.adaptive_avg_pool2d(self.body(x), self.grid)
        return torch.softmax(logits, dim=1).flatten(1)


class Extractors(NamedTuple):
    identity: Extractor
    perceptual: Extractor
    parsing: Extractor


def default_extractors(seed: int = 1234) -> Extractors:
    with seeded(seed):
        ex = Extractors(ToyIdentityExtractor(), ToyPerceptualExtractor(), ToyParsingExtractor())
    for e in ex:
        e.freeze()
    return ex


class StubExtractor(Extractor):
    """Wraps a plain function; handy for pinning embeddings in tests."""

    def __init__(self, fn: Callable[[torch.Tensor], torch.Tensor], kind: str = "identity", width: int = 0):
        super().__init__(kind, width)
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def embed(extractor: Extractor, x: torch.Tensor) -> torch.Tensor:
    return extractor(_batched(x))


# --- identity terms ------------------------------------------------------------

def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity; zero-norm rows are an error."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise NumericError("zero-norm embedding has no direction")
    return (a * b).sum(dim=-1) / (na * nb)


def cosine_identity_distance(x, y, id_extractor: Extractor) -> torch.Tensor:
    """Mean over the batch of ``1 - cos(F(x), F(y))``."""
    return (1 - cosine(embed(id_extractor, x), embed(id_extractor, y))).mean()


def contrastive_loss(d_c, same_identity, tau_plus: float = TAU_PLUS, tau_minus: float = TAU_MINUS):
    """Hinge on the identity distance: pull same pairs under ``tau_plus``,
    push different pairs beyond ``tau_minus``. Batch-mean for tensors."""
    if not tau_plus < tau_minus:
        raise ValidationError("tau_plus must be smaller than tau_minus")
    d_c = torch.as_tensor(d_c)
    if not d_c.is_floating_point():
        d_c = d_c.to(torch.get_default_dtype())
    same = torch.as_tensor(same_identity, dtype=d_c.dtype)
    loss = same * torch.clamp(d_c - tau_plus, min=0) + (1 - same) * torch.clamp(tau_minus - d_c, min=0)
    return loss.mean()


def difference_from_embeddings(e_ori: torch.Tensor, others: Sequence[torch.Tensor]) -> torch.Tensor:
    return sum(torch.clamp(cosine(e_ori, e), min=0) for e in others).mean()


def recovery_from_embeddings(e_ori: torch.Tensor, e_rec: torch.Tensor) -> torch.Tensor:
    return (1 - cosine(e_ori, e_rec)).mean()


def diversity_from_embeddings(embs: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over unordered pairs of positive cosine similarity."""
    terms = [torch.clamp(cosine(a, b), min=0) for a, b in itertools.combinations(embs, 2)]
    if not terms:
        return torch.zeros(())
    return sum(terms).mean()


def identity_difference_loss(x_ori, s1: Sequence[torch.Tensor], id_extractor: Extractor) -> torch.Tensor:
    e = embed(id_extractor, x_ori)
    return difference_from_embeddings(e, [embed(id_extractor, x) for x in s1])


def identity_recovery_loss(x_ori, x_rec, id_extractor: Extractor) -> torch.Tensor:
    return recovery_from_embeddings(embed(id_extractor, x_ori), embed(id_extractor, x_rec))


def identity_diversity_loss(s1: Sequence[torch.Tensor], id_extractor: Extractor) -> torch.Tensor:
    return diversity_from_embeddings([embed(id_extractor, x) for x in s1])


# --- image-level terms ----------------------------------------------------------

def l2_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).flatten(1).norm(dim=1).mean()


def perceptual_loss(x, ref, perceptual_extractor: Extractor) -> torch.Tensor:
    return l2_distance(embed(perceptual_extractor, x), embed(perceptual_extractor, ref))


def parsing_loss(x, ref, parsing_extractor: Extractor) -> torch.Tensor:
    return l2_distance(embed(parsing_extractor, x), embed(parsing_extractor, ref))


def l1_loss(x, ref) -> torch.Tensor:
    return (x - ref).abs().mean()


def latent_regularization(codes) -> torch.Tensor:
    """``sum_{i=1}^{N-1} ||w_i - w_bar||`` with ``w_bar`` the mean of all N rows.

    The last row is left out of the sum; batch-mean over leading dims.
    """
    w = codes.stack() if isinstance(codes, LatentPyramid) else torch.as_tensor(codes)
    w_bar = w.mean(dim=-2, keepdim=True)
    dist = (w[..., :-1, :] - w_bar).norm(dim=-1).sum(dim=-1)
    return dist.mean()


# --- adversarial terms ----------------------------------------------------------

def r1_penalty(real: torch.Tensor, discriminator: Callable, gamma: float = R1_GAMMA) -> torch.Tensor:
    """``gamma/2 * E ||grad_x D(x)||^2`` at real samples (gradient of the logit)."""
    real = real.detach().requires_grad_(True)
    logits = discriminator(real)
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True)
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(dim=1).mean()


def discriminator_loss(real, fakes: Sequence[torch.Tensor], discriminator, gamma: float = R1_GAMMA):
    """Non-saturating discriminator loss plus R1, one term per fake set.

    ``discriminator`` returns logits; ``D(x) = sigmoid(logit)``.
    """
    real_term = F.softplus(-discriminator(real)).mean()
    r1 = r1_penalty(real, discriminator, gamma) if gamma else torch.zeros(())
    total = 0
    for fake in fakes:
        total = total + real_term + F.softplus(discriminator(fake.detach())).mean() + r1
    return total


def generator_adv_loss(fakes: Sequence[torch.Tensor], discriminator) -> torch.Tensor:
    return sum(F.softplus(-discriminator(fake)).mean() for fake in fakes)


def adversarial_losses(real, fakes, discriminator, gamma: float = R1_GAMMA):
    """Return ``(L_D with R1, L_G)``; ``fakes`` is a tensor or a list of tensors."""
    if torch.is_tensor(fakes):
        fakes = [fakes]
    return discriminator_loss(real, fakes, discriminator, gamma), generator_adv_loss(fakes, discriminator)


# --- totals ---------------------------------------------------------------------

STAGE1_WEIGHTS = {"ctr": 1.0, "lpips": 1.0, "rec": 3.5, "parse": 0.1, "reg": 0.1, "adv": 1.0}
STAGE2_WEIGHTS = {"id": 2.0, "lpips": 1.0, "rec": 0.05, "parse": 0.1, "reg": 0.1, "adv": 1.0}


@dataclass
class LossWeights:
    stage1: dict = field(default_factory=lambda: dict(STAGE1_WEIGHTS))
    stage2: dict = field(default_factory=lambda: dict(STAGE2_WEIGHTS))
    r1_gamma: float = R1_GAMMA

    def __post_init__(self):
        for table in (self.stage1, self.stage2):
            for name, w in table.items():
                if w < 0:
                    raise ValidationError(f"loss weight {name} must be non-negative")
        if self.r1_gamma < 0:
            raise ValidationError("R1 coefficient must be non-negative")


@dataclass
class LossReport:
    stage: int
    terms: dict
    total: object

    def as_record(self, step: int | None = None) -> dict:
        rec = {"stage": self.stage, "terms": {k: _scalar(v) for k, v in self.terms.items()},
               "total": _scalar(self.total)}
        if step is not None:
            rec = {"step": step, **rec}
        return rec


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def _weighted(terms: dict, weights: dict):
    unknown = set(terms) - set(weights)
    if unknown:
        raise ValidationError(f"no weight for loss terms {sorted(unknown)}")
    total = 0.0
    for name, value in terms.items():
        total = total + weights[name] * value
    return total


def stage1_total(terms: dict, weights: LossWeights | dict | None = None) -> LossReport:
    table = weights.stage1 if isinstance(weights, LossWeights) else (weights or STAGE1_WEIGHTS)
    return LossReport(1, dict(terms), _weighted(terms, table))


def stage2_total(terms: dict, weights: LossWeights | dict | None = None) -> LossReport:
    """Stage-2 total; ``dif``/``rev``/``div`` are folded into ``id`` if given separately."""
    table = weights.stage2 if isinstance(weights, LossWeights) else (weights or STAGE2_WEIGHTS)
    terms = dict(terms)
    parts = {k: terms.pop(k) for k in ("dif", "rev", "div") if k in terms}
    if parts:
        if "id" in terms:
            raise ValidationError("give either 'id' or its parts, not both")
        terms["id"] = sum(parts.values())
    report = LossReport(2, {**parts, **terms}, _weighted(terms, table))
    return report
