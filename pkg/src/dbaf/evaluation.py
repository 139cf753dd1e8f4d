"""Quantitative evaluation: recognition rates, image-quality metrics, identity
embedding export, and detector-based utility distances."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import NumericError, ValidationError
from .losses import Extractor, perceptual_loss
from .utils import atomic_write_text

REPORT_SCHEMA = "dbaf-report-v1"
PSNR_CAP = 99.0
FACENET_THRESHOLD = 1.1
ARCFACE_THRESHOLD = 0.8


@dataclass
class RecognitionConfig:
    embedder: Extractor
    threshold: float
    metric: str = "cosine"

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValidationError("recognition threshold must be positive")
        if self.metric not in ("euclidean", "cosine"):
            raise ValidationError(f"unknown comparison metric {self.metric!r}")


def facenet_config(embedder: Extractor) -> RecognitionConfig:
    return RecognitionConfig(embedder, FACENET_THRESHOLD, "euclidean")


def arcface_config(embedder: Extractor) -> RecognitionConfig:
    return RecognitionConfig(embedder, ARCFACE_THRESHOLD, "cosine")


def embedding_distance(a: torch.Tensor, b: torch.Tensor, metric: str) -> torch.Tensor:
    """Row-wise distance: squared L2 between unit embeddings, or cosine distance."""
    na, nb = a.norm(dim=-1, keepdim=True), b.norm(dim=-1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise NumericError("zero-norm embedding")
    ua, ub = a / na, b / nb
    if metric == "euclidean":
        return (ua - ub).pow(2).sum(dim=-1)
    if metric == "cosine":
        return 1 - (ua * ub).sum(dim=-1)
    raise ValidationError(f"unknown comparison metric {metric!r}")


@torch.no_grad()
def recognition_rate(pairs: Sequence[tuple[torch.Tensor, torch.Tensor]], config: RecognitionConfig) -> float:
    """Fraction of (original, generated) pairs still matched, i.e. distance below threshold."""
    if len(pairs) == 0:
        raise ValidationError("recognition rate needs at least one pair")
    originals = torch.stack([p[0] for p in pairs])
    generated = torch.stack([p[1] for p in pairs])
    dist = embedding_distance(config.embedder(originals), config.embedder(generated), config.metric)
    return float((dist < config.threshold).double().mean())


def mse(x: torch.Tensor, ref: torch.Tensor) -> float:
    return float((x.double() - ref.double()).pow(2).mean())


def psnr(x: torch.Tensor, ref: torch.Tensor, max_val: float = 1.0, cap: float = PSNR_CAP) -> float:
    """``10 log10(max_val^2 / mse)`` in dB; identical inputs report ``cap``."""
    err = mse(x, ref)
    if err == 0:
        return cap
    return min(cap, 10.0 * math.log10(max_val ** 2 / err))


@torch.no_grad()
def perceptual_distance(x: torch.Tensor, ref: torch.Tensor, extractor: Extractor) -> float:
    return float(perceptual_loss(x, ref, extractor))


def _sqrt_psd_trace(sigma_a: np.ndarray, sigma_b: np.ndarray, tol: float = 1e-8) -> float:
    """``Tr((S_a S_b)^{1/2})`` via the symmetric form ``S_a^{1/2} S_b S_a^{1/2}``."""
    w, v = np.linalg.eigh((sigma_a + sigma_a.T) / 2)
    w = np.where(w > tol, w, 0.0)
    root_a = (v * np.sqrt(w)) @ v.T
    inner = root_a @ sigma_b @ root_a
    ev = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(ev, 0.0, None)).sum())


def fid(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two ``(n, m)`` embedding sets."""
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValidationError("fid expects two (n, m) arrays with equal m")
    if min(len(a), len(b)) <= a.shape[1]:
        raise ValidationError(f"fid needs more samples than embedding dims ({a.shape[1]})")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NumericError("non-finite embeddings give a non-finite covariance")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise NumericError("non-finite covariance")
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * _sqrt_psd_trace(cov_a, cov_b)
    return max(float(value), 0.0)


@torch.no_grad()
def export_identity_embeddings(images, keys, model, embedder: Extractor, out=None) -> list[tuple]:
    """Anonymize every image under every key and embed the result.

    ``images`` is a mapping ``source_id -> (3, H, W)`` or a sequence (ids are
    positions). Rows are ``(source_id, key_seed, embedding)``; written as CSV
    with a header when ``out`` is given.
    """
    from .model import anonymize

    items = list(images.items()) if isinstance(images, dict) else list(enumerate(images))
    rows = []
    for source_id, image in items:
        for key in keys:
            emb = embedder(anonymize(image, key, model).unsqueeze(0))[0]
            rows.append((source_id, key.seed, emb.double().numpy()))
    if out is not None:
        write_embedding_table(rows, out)
    return rows


def write_embedding_table(rows, out) -> None:
    import io

    width = len(rows[0][2]) if rows else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source_id", "key_seed"] + [f"e{i}" for i in range(width)])
    for source_id, seed, emb in rows:
        w.writerow([source_id, seed] + [repr(float(v)) for v in emb])
    atomic_write_text(Path(out), buf.getvalue())


def read_embedding_table(path) -> list[tuple]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [(row[0], int(row[1]), np.array([float(v) for v in row[2:]])) for row in r]


@dataclass
class DetectorOutput:
    detected: bool
    bbox: tuple | None = None
    landmarks: np.ndarray | None = None

    def __post_init__(self):
        if not self.detected and (self.bbox is not None or self.landmarks is not None):
            raise ValidationError("undetected face cannot carry a box or landmarks")
        if self.bbox is not None and len(self.bbox) != 4:
            raise ValidationError("bounding box needs 4 coordinates")
        if self.landmarks is not None:
            self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
            if self.landmarks.shape != (68, 2):
                raise ValidationError(f"expected (68, 2) landmarks, got {self.landmarks.shape}")


def utility_distances(outputs_a: Sequence[DetectorOutput], outputs_b: Sequence[DetectorOutput]):
    """Return ``(detect rate of b, mean bbox coordinate distance, mean landmark distance)``.

    Distances are averaged over images detected in both lists; ``nan`` if none.
    """
    if len(outputs_a) != len(outputs_b):
        raise ValidationError("detector output lists must be aligned")
    if not outputs_b:
        raise ValidationError("no detector outputs")
    rate = sum(o.detected for o in outputs_b) / len(outputs_b)
    box_d, lm_d = [], []
    for a, b in zip(outputs_a, outputs_b):
        if not (a.detected and b.detected):
            continue
        if a.bbox is not None and b.bbox is not None:
            box_d.append(np.abs(np.subtract(a.bbox, b.bbox, dtype=np.float64)).mean())
        if a.landmarks is not None and b.landmarks is not None:
            lm_d.append(np.linalg.norm(a.landmarks - b.landmarks, axis=1).mean())
    bbox = float(np.mean(box_d)) if box_d else float("nan")
    landmark = float(np.mean(lm_d)) if lm_d else float("nan")
    return rate, bbox, landmark


# --- directory-level evaluation ------------------------------------------------

METRICS = ("mse", "psnr", "lpips", "fid", "recognition_facenet", "recognition_arcface")


def _fid_features(extractors, images: torch.Tensor) -> np.ndarray:
    # identity embeddings: the lowest-dimensional frozen features available
    return extractors.identity(images).double().numpy()


def _unit(x: torch.Tensor) -> torch.Tensor:
    return (x + 1) / 2


@torch.no_grad()
def evaluate_pairs(originals: torch.Tensor, generated: torch.Tensor, metrics: Sequence[str], extractors) -> dict:
    """Aggregate metrics over aligned image batches in [-1, 1].

    Pixel metrics are computed on the [0, 1] range, per pair, then averaged.
    """
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ValidationError(f"unknown metrics {unknown}; valid: {', '.join(METRICS)}")
    if len(originals) == 0 or originals.shape != generated.shape:
        raise ValidationError("need a non-empty set of aligned image pairs")
    out = {}
    pairs = list(zip(originals, generated))
    for name in metrics:
        if name == "mse":
            out[name] = float(np.mean([mse(_unit(g), _unit(o)) for o, g in pairs]))
        elif name == "psnr":
            out[name] = float(np.mean([psnr(_unit(g), _unit(o)) for o, g in pairs]))
        elif name == "lpips":
            out[name] = float(np.mean([perceptual_distance(g, o, extractors.perceptual) for o, g in pairs]))
        elif name == "fid":
            out[name] = fid(_fid_features(extractors, originals), _fid_features(extractors, generated))
        elif name == "recognition_facenet":
            out[name] = recognition_rate(pairs, facenet_config(extractors.identity))
        elif name == "recognition_arcface":
            out[name] = recognition_rate(pairs, arcface_config(extractors.identity))
    return out


def build_report(metrics: dict, n_pairs: int, **extra) -> dict:
    return {"schema": REPORT_SCHEMA, "n_pairs": n_pairs, "metrics": metrics, **extra}
