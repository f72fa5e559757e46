"""Datasets (builtin synthetic shapes, PNG folders) and augmentation."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..numerics import RngStream

SHAPES = ("disk", "square", "triangle", "diamond", "plus",
          "ring", "frame", "cross", "hbar", "vtriangle")

PALETTE = np.array([
    [230, 60, 50], [60, 180, 75], [70, 110, 230], [240, 200, 40], [160, 70, 200], [235, 235, 235],
], dtype=np.float32) / 127.5 - 1.0

BACKGROUNDS = np.array([[20, 20, 24]], dtype=np.float32) / 127.5 - 1.0

AUGMENT_SCALES = {"strong": (0.2, 1.0), "weak": (0.8, 1.0), "none": None}


class DataError(Exception):
    """Unreadable or malformed input data."""


def _shape_mask(kind: str, x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    ax, ay = np.abs(x), np.abs(y)
    if kind == "disk":
        return x * x + y * y <= r * r
    if kind == "square":
        return np.maximum(ax, ay) <= 0.8 * r
    if kind == "triangle":
        return (y <= 0.75 * r) & (y >= 2 * ax - r)
    if kind == "vtriangle":
        return (y >= -0.75 * r) & (-y >= 2 * ax - r)
    if kind == "diamond":
        return ax + ay <= r
    if kind == "plus":
        w = 0.3 * r
        return ((ax <= w) & (ay <= r)) | ((ay <= w) & (ax <= r))
    if kind == "ring":
        d = np.sqrt(x * x + y * y)
        return (d <= r) & (d >= 0.55 * r)
    if kind == "frame":
        m = np.maximum(ax, ay)
        return (m <= 0.85 * r) & (m >= 0.5 * r)
    if kind == "cross":
        w = 0.25 * r * math.sqrt(2)
        return ((np.abs(x - y) <= w) | (np.abs(x + y) <= w)) & (np.maximum(ax, ay) <= 0.8 * r)
    if kind == "hbar":
        return (ax <= r) & (ay <= 0.35 * r)
    raise ValueError(kind)


def render_shape(kind: str, rng: RngStream, size: int = 32, supersample: int = 4) -> np.ndarray:
    """One anti-aliased shape image, ``[3, size, size]`` in [-1, 1]."""
    g = rng.numpy()
    r = g.uniform(0.30, 0.42) * size
    cx, cy = g.uniform(r * 0.85, size - r * 0.85, size=2)
    fg = PALETTE[g.integers(len(PALETTE))]
    bg = BACKGROUNDS[g.integers(len(BACKGROUNDS))]
    s = supersample
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(coords - cy, coords - cx, indexing="ij")
    cover = _shape_mask(kind, xx, yy, r).reshape(size, s, size, s).mean(axis=(1, 3))
    img = bg[:, None, None] * (1 - cover) + fg[:, None, None] * cover
    return img.astype(np.float32)


def synthetic_dataset(n: int, split: str = "train", seed: int = 7, size: int = 32):
    """Balanced, deterministic corpus of ``n`` shape images and labels.

    Image ``i`` of a split depends only on ``(seed, split, i)``; splits use
    disjoint streams.
    """
    root = RngStream(seed).split(f"synthetic/{split}")
    labels = np.arange(n) % len(SHAPES)
    imgs = np.stack([render_shape(SHAPES[c], root.split(i), size) for i, c in enumerate(labels)])
    return torch.from_numpy(imgs), torch.from_numpy(labels.astype(np.int64))


def load_png(path: str | Path) -> torch.Tensor:
    try:
        im = Image.open(path)
        im.load()
    except Exception as e:  # PIL raises a zoo of types
        raise DataError(f"cannot read {path}: {e}") from e
    if im.mode not in ("RGB", "RGBA", "P"):
        raise DataError(f"{path}: not an RGB image (mode {im.mode})")
    arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def save_png(image: torch.Tensor, path: str | Path):
    arr = ((image.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).numpy()).save(path)


def png_folder_dataset(path: str | Path, split: str = "train"):
    """``path/<split>/<class>/*.png`` (or ``path/<class>/*.png``), sorted by name."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    if (root / split).is_dir():
        root = root / split
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class subfolders in {root}")
    imgs, labels = [], []
    for c, name in enumerate(classes):
        for f in sorted((root / name).glob("*.png")):
            imgs.append(load_png(f))
            labels.append(c)
    if not imgs:
        raise DataError(f"no PNG files under {root}")
    if len({tuple(i.shape) for i in imgs}) != 1:
        raise DataError("images in a dataset must share one size")
    return torch.stack(imgs), torch.tensor(labels)


def ingest_dataset(source: str, split: str, n: int = 2000, seed: int = 7, size: int = 32):
    """``source`` is ``"synthetic"`` or a directory of class subfolders."""
    if source == "synthetic":
        return synthetic_dataset(n, split, seed, size)
    return png_folder_dataset(source, split)


def sample_crop(h: int, w: int, scale: tuple[float, float], gen: np.random.Generator,
                ratio=(3 / 4, 4 / 3)):
    """Random-resized-crop box ``(top, left, ch, cw)`` whose area fraction
    lies in ``scale``; falls back to the full image."""
    area = h * w
    for _ in range(10):
        target = gen.uniform(*scale) * area
        aspect = math.exp(gen.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h and scale[0] <= ch * cw / area <= scale[1]:
            top = int(gen.integers(0, h - ch + 1))
            left = int(gen.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def augment(image: torch.Tensor, policy: str, rng: RngStream) -> torch.Tensor:
    """Random resized crop (policy scale range) + horizontal flip, p = 0.5."""
    if policy not in AUGMENT_SCALES:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    scale = AUGMENT_SCALES[policy]
    if scale is None:
        return image
    gen = rng.numpy()
    _, h, w = image.shape
    top, left, ch, cw = sample_crop(h, w, scale, gen)
    crop = image[:, top:top + ch, left:left + cw]
    out = F.interpolate(crop[None], size=(h, w), mode="bilinear", align_corners=False)[0]
    if gen.random() < 0.5:
        out = out.flip(-1)
    return out


def augment_batch(images: torch.Tensor, policy: str, rng: RngStream) -> torch.Tensor:
    if policy == "none":
        return images
    return torch.stack([augment(img, policy, rng.split(i)) for i, img in enumerate(images)])
