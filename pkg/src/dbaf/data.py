"""Image I/O and a procedural toy face set for desk-scale training."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ValidationError
from .utils import atomic_write_bytes

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def load_image(path, size: int | None = None) -> torch.Tensor:
    """Read an 8-bit image as a ``(3, H, W)`` tensor in [-1, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BICUBIC)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = ((image.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round()
    return arr.permute(1, 2, 0).numpy().astype(np.uint8)


def save_image(image: torch.Tensor, path) -> None:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    atomic_write_bytes(Path(path), buf.getvalue())


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def load_image_dir(directory, size: int | None = None) -> torch.Tensor:
    paths = list_images(directory)
    if not paths:
        raise ValidationError(f"no images found in {directory}")
    return torch.stack([load_image(p, size) for p in paths])


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synthetic_faces(n: int = 16, size: int = 64, seed: int = 0) -> torch.Tensor:
    """Procedural frontal "faces": identity lives in face shape, tone, eyes,
    nose and mouth geometry; background, hair and an optional occluding bar
    act as attributes. Returns ``(n, 3, size, size)`` in [-1, 1].
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    out = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        bg_a, bg_b = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        t = (yy + xx * rng.uniform(-0.5, 0.5))[..., None]
        img = bg_a * (1 - t) + bg_b * t
        cx = 0.5 + rng.uniform(-0.05, 0.05)
        cy = 0.54 + rng.uniform(-0.04, 0.04)
        ry, rx = rng.uniform(0.28, 0.36), rng.uniform(0.2, 0.28)
        hair = rng.uniform(0.0, 0.6, 3)
        img[_ellipse(yy, xx, cy - 0.08, cx, ry + 0.04, rx + 0.05)] = hair
        skin = np.array([0.95, 0.75, 0.6]) * rng.uniform(0.45, 1.0) + rng.uniform(-0.05, 0.05, 3)
        face = _ellipse(yy, xx, cy, cx, ry, rx)
        img[face] = np.clip(skin, 0, 1)
        eye_dx, eye_y = rng.uniform(0.07, 0.12), cy - rng.uniform(0.04, 0.1)
        eye_r = rng.uniform(0.02, 0.04)
        iris = rng.uniform(0.0, 0.5, 3)
        for sx in (-1, 1):
            img[_ellipse(yy, xx, eye_y, cx + sx * eye_dx, eye_r * 0.8, eye_r * 1.4)] = 0.95
            img[_ellipse(yy, xx, eye_y, cx + sx * eye_dx, eye_r * 0.7, eye_r * 0.7)] = iris
        nose_len = rng.uniform(0.05, 0.12)
        nose = (np.abs(xx - cx) < 0.015) & (yy > eye_y + 0.02) & (yy < eye_y + 0.02 + nose_len)
        img[nose] = np.clip(skin * 0.75, 0, 1)
        mouth_y = cy + rng.uniform(0.12, 0.18)
        mouth_w = rng.uniform(0.06, 0.11)
        img[_ellipse(yy, xx, mouth_y, cx, rng.uniform(0.01, 0.03), mouth_w)] = [0.7, 0.15, 0.2]
        if rng.uniform() < 0.25:
            y0 = rng.uniform(0.3, 0.7)
            img[(yy > y0) & (yy < y0 + 0.06)] = rng.uniform(0.0, 0.3, 3)
        out[i] = img
    return torch.from_numpy(out * 2.0 - 1.0).permute(0, 3, 1, 2).contiguous()
