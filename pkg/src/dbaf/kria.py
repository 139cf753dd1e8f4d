"""Key-authorized reversible identity anonymization: keys and the keyed transform."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .cid import DisentangledCodes
from .errors import ShapeError, ValidationError
from .latent_codec import LEVEL_ROWS, EqualLinear, LatentPyramid
from .utils import atomic_write_text

KEY_FORMAT = "dbaf-key-v1"
KRIA_DEPTH = 7


def passphrase_seed(passphrase: str) -> int:
    if not passphrase:
        raise ValidationError("passphrase must be non-empty")
    digest = hashlib.sha256(passphrase.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def seed_fingerprint(seed: int) -> str:
    return hashlib.sha256(int(seed).to_bytes(8, "big")).hexdigest()[:8]


@dataclass(frozen=True)
class AnonKey:
    seed: int
    d: int
    blocks: LatentPyramid
    source: str = "seed"

    @property
    def fingerprint(self) -> str:
        return seed_fingerprint(self.seed)

    def tensor(self) -> torch.Tensor:
        """The key as one ``(14, d)`` stack."""
        return self.blocks.stack()


def generate_key(seed: int | None = None, passphrase: str | None = None, d: int = 64) -> AnonKey:
    """Draw the key blocks i.i.d. standard normal from a PRNG keyed by ``seed``.

    Passphrases are hashed to a 64-bit seed first.
    """
    if (seed is None) == (passphrase is None):
        raise ValidationError("exactly one of seed or passphrase is required")
    source = "seed"
    if passphrase is not None:
        seed = passphrase_seed(passphrase)
        source = "passphrase"
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
    rng = np.random.default_rng(seed)
    blocks = LatentPyramid(*(torch.from_numpy(rng.standard_normal((rows, d)).astype(np.float32))
                             for rows in LEVEL_ROWS))
    return AnonKey(seed=seed, d=d, blocks=blocks, source=source)


def save_key(key: AnonKey, path, export_raw: bool = False) -> None:
    doc = {
        "format": KEY_FORMAT,
        "seed": str(key.seed),
        "source": key.source,
        "d": key.d,
        "block_shapes": [list(b.shape) for b in key.blocks],
        "fingerprint": key.fingerprint,
    }
    if export_raw:
        doc["raw"] = [b.tolist() for b in key.blocks]
    atomic_write_text(Path(path), json.dumps(doc, indent=2) + "\n")


def load_key(path) -> AnonKey:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read key file {path}: {exc}") from exc
    if doc.get("format") != KEY_FORMAT:
        raise ValidationError(f"{path}: not a {KEY_FORMAT} key file")
    key = generate_key(seed=int(doc["seed"]), d=int(doc["d"]))
    if [list(b.shape) for b in key.blocks] != doc.get("block_shapes"):
        raise ValidationError(f"{path}: block shapes do not match the regenerated key")
    return AnonKey(seed=key.seed, d=key.d, blocks=key.blocks, source=doc.get("source", "seed"))


class KRIA(nn.Module):
    """Seven equal-linear layers mapping ``[key_row, identity_row]`` (width 2d) to width d."""

    def __init__(self, d: int, depth: int = KRIA_DEPTH):
        super().__init__()
        self.d = d
        dims = [2 * d] + [d] * depth
        self.layers = nn.ModuleList(EqualLinear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, key_rows: torch.Tensor, identity_rows: torch.Tensor) -> torch.Tensor:
        x = torch.cat([key_rows, identity_rows], dim=-1)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, 0.2) * math.sqrt(2)
        return x


def _key_pyramid(key) -> LatentPyramid:
    if isinstance(key, AnonKey):
        return key.blocks
    if isinstance(key, LatentPyramid):
        return key
    return LatentPyramid.from_stack(key)


def keyed_transform(identity: LatentPyramid, key, params: KRIA) -> LatentPyramid:
    """Apply the keyed mapping row by row on every level.

    ``key`` may be an :class:`AnonKey`, a key pyramid, or a ``(..., 14, d)``
    tensor; unbatched keys broadcast over the identity batch.
    """
    kp = _key_pyramid(key)
    out = []
    for p, i in zip(kp, identity):
        if p.shape[-2:] != i.shape[-2:]:
            raise ShapeError(f"key block {tuple(p.shape)} does not match identity {tuple(i.shape)}")
        p = p.to(i.dtype).expand_as(i)
        out.append(params(p, i))
    return LatentPyramid(*out)


class FiveWayCodes(NamedTuple):
    ano1: LatentPyramid
    ano2: LatentPyramid
    rec: LatentPyramid
    err1: LatentPyramid
    err2: LatentPyramid


def check_distinct_keys(cor1: AnonKey, cor2: AnonKey, err1: AnonKey, err2: AnonKey) -> None:
    seeds = [k.seed for k in (cor1, cor2, err1, err2)]
    if len(set(seeds)) != 4:
        raise ValidationError(f"the four keys must have distinct seeds, got {seeds}")


def five_way(ori: DisentangledCodes, ano: DisentangledCodes, cor1, cor2, err1, err2, params: KRIA) -> FiveWayCodes:
    """Tensor-level construction; keys may be batched key stacks."""
    return FiveWayCodes(
        ano1=ori.attribute + keyed_transform(ori.identity, cor1, params),
        ano2=ori.attribute + keyed_transform(ori.identity, cor2, params),
        rec=ano.attribute + keyed_transform(ano.identity, cor1, params),
        err1=ano.attribute + keyed_transform(ano.identity, err1, params),
        err2=ano.attribute + keyed_transform(ano.identity, err2, params),
    )


def build_five_way(ori_codes: DisentangledCodes, ano_codes: DisentangledCodes,
                   cor1: AnonKey, cor2: AnonKey, err1: AnonKey, err2: AnonKey,
                   params: KRIA) -> FiveWayCodes:
    check_distinct_keys(cor1, cor2, err1, err2)
    return five_way(ori_codes, ano_codes, cor1, cor2, err1, err2, params)
