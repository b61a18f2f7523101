"""Seeded synthetic-shapes dataset and lossless raster I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .core import LabeledDataset, ParameterError, RandomSource

# (shape, rgb) per category; every category is a unique pairing
CATEGORIES = [
    ("circle", (0.90, 0.20, 0.20)),
    ("square", (0.20, 0.80, 0.25)),
    ("triangle", (0.20, 0.35, 0.95)),
    ("diamond", (0.95, 0.85, 0.15)),
    ("ring", (0.85, 0.25, 0.85)),
    ("cross", (0.15, 0.85, 0.85)),
    ("hbar", (0.95, 0.55, 0.10)),
    ("vbar", (0.55, 0.25, 0.80)),
    ("ellipse", (0.95, 0.95, 0.95)),
    ("frame", (0.10, 0.55, 0.50)),
]
CATEGORY_NAMES = [name for name, _ in CATEGORIES]


def _shape_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        w = max(r * 0.3, 1.0)
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.4) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= r * 0.4) & (np.abs(dy) <= r)
    if kind == "ellipse":
        return (dy / (0.55 * r)) ** 2 + (dx / r) ** 2 <= 1.0
    if kind == "frame":
        inner = (np.abs(dy) <= r * 0.5) & (np.abs(dx) <= r * 0.5)
        return (np.abs(dy) <= r * 0.9) & (np.abs(dx) <= r * 0.9) & ~inner
    raise ValueError(kind)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    # low-frequency noise plus faint stripes, muted tint
    coarse = rng.uniform(0.0, 1.0, (3, 4, 4))
    reps = -(-size // 4)
    field = np.kron(coarse, np.ones((reps, reps)))[:, :size, :size]
    kernel = np.ones(5) / 5.0
    for axis in (1, 2):
        field = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), axis, field)
    yy, xx = np.mgrid[:size, :size]
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.3, 0.9)
    stripes = 0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    base = rng.uniform(0.25, 0.55)
    tint = rng.uniform(-0.05, 0.05, (3, 1, 1))
    bg = base + 0.18 * (field - 0.5) + 0.08 * (stripes - 0.5) + tint
    return bg


def render_sample(category: int, rng: np.random.Generator, size: int = 32,
                  jitter: float = 0.3, opacity: float = 0.35) -> np.ndarray:
    """One image; ``jitter`` scales the admissible centre offset, ``opacity`` the object."""
    kind, color = CATEGORIES[category]
    img = _background(rng, size)
    r = rng.uniform(size * 0.2, size * 0.3)
    margin = r + 1
    half = (size - 2 * margin) / 2 * jitter
    cy, cx = size / 2 + rng.uniform(-half, half, 2)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    mask = _shape_mask(kind, yy, xx, cy, cx, r)
    rgb = np.clip(np.asarray(color) + rng.uniform(-0.08, 0.08, 3), 0, 1)
    shade = 1.0 + 0.1 * (yy - cy) / size
    for c in range(3):
        img[c][mask] = (opacity * rgb[c] * shade + (1 - opacity) * img[c])[mask]
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_shapes(n_per_class: int, seed: int, split: str = "train", size: int = 32,
                num_categories: int = 10, jitter: float = 0.3, opacity: float = 0.35) -> LabeledDataset:
    """Deterministic synthetic dataset; sample order is class-interleaved."""
    if not 2 <= num_categories <= len(CATEGORIES):
        raise ParameterError(f"num_categories must be in [2, {len(CATEGORIES)}]")
    if n_per_class < 1:
        raise ParameterError("n_per_class must be >= 1")
    # distinct stream per split so train/test never coincide
    rng = RandomSource(seed).fork(0 if split == "train" else 1).generator
    labels = np.tile(np.arange(num_categories), n_per_class)
    images = np.stack([render_sample(int(y), rng, size, jitter, opacity) for y in labels])
    return LabeledDataset(images, labels, num_categories, split, CATEGORY_NAMES[:num_categories])


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)


def save_png(path, array, meta=None) -> None:
    """Write a (C, H, W) image or (H, W) map as PNG; ``meta`` goes into text chunks."""
    array = np.asarray(array)
    if array.ndim == 3:
        array = array.transpose(1, 2, 0)
        if array.shape[2] == 1:
            array = array[:, :, 0]
    info = None
    if meta:
        info = PngInfo()
        for k, v in sorted(meta.items()):
            info.add_text(str(k), str(v))
    Image.fromarray(to_uint8(array)).save(path, format="PNG", optimize=False, pnginfo=info)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path)).astype(np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return arr[:, :, :3].transpose(2, 0, 1)


def load_image_folder(root, split: str = "train") -> LabeledDataset:
    """Load ``root/<category>/*.png``; categories are sorted directory names."""
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ParameterError(f"{root}: no category directories")
    images, labels = [], []
    for idx, name in enumerate(classes):
        for f in sorted((root / name).glob("*.png")):
            images.append(load_png(f))
            labels.append(idx)
    if not images:
        raise ParameterError(f"{root}: no images")
    return LabeledDataset(np.stack(images), np.array(labels), len(classes), split, classes)
