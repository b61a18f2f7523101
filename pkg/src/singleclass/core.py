"""Image value model, perturbation application, persistence and seeded randomness."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"SADV"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Array shape does not match the expected image shape."""


class ParameterError(ValueError):
    """Invalid numeric parameter or precondition."""


class RandomSource:
    """Seeded draw stream. Not safe to share across concurrent tasks; use :meth:`fork`."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def choice(self, n: int, count: int) -> np.ndarray:
        return self._gen.choice(n, size=count, replace=False)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def fork(self, index: int) -> "RandomSource":
        # child seed derived from (parent seed, index); never touches parent state
        seq = np.random.SeedSequence([self.seed, int(index)])
        return RandomSource(int(seq.generate_state(1, dtype=np.uint32)[0]))


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_categories: int
    split: str = "train"
    names: Optional[list] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (n, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError("images and labels differ in length")
        if self.split not in ("train", "test"):
            raise ParameterError(f"unknown split {self.split!r}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_categories):
            raise ParameterError("label outside [0, num_categories)")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], self.num_categories,
                              self.split, self.names)

    def of_category(self, y: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == y))

    def excluding(self, y: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels != y))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


@dataclass
class Perturbation:
    values: np.ndarray
    eta: float
    source_category: int
    target_category: int
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.eta <= 0:
            raise ParameterError("eta must be positive")
        if self.source_category == self.target_category:
            raise ParameterError("source and target category must differ")

    @property
    def linf(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    @classmethod
    def zeros(cls, shape, eta, source, target, seed=0):
        return cls(np.zeros(shape, np.float32), eta, source, target, seed)


def check_image_shape(x: np.ndarray, shape: Optional[Sequence[int]]) -> None:
    if shape is None:
        return
    shape = tuple(shape)
    if x.shape[-len(shape):] != shape:
        raise ShapeError(f"expected trailing shape {shape}, got {x.shape}")


def clip_to_valid(image, shape=None) -> np.ndarray:
    image = np.asarray(image)
    check_image_shape(image, shape)
    return np.clip(image, 0.0, 1.0)


def apply_perturbation(x, p) -> np.ndarray:
    """Return ``clip(x - p)``; works on a single image or a batch."""
    values = p.values if isinstance(p, Perturbation) else np.asarray(p)
    x = np.asarray(x)
    if x.shape[-values.ndim:] != values.shape:
        raise ShapeError(f"perturbation {values.shape} does not match images {x.shape}")
    return np.clip(x - values, 0.0, 1.0).astype(x.dtype, copy=False)


def batch_sample(n_items: int, count: int, rng: RandomSource) -> np.ndarray:
    """Indices drawn uniformly without replacement."""
    if count > n_items:
        raise ParameterError(f"cannot draw {count} from {n_items} items")
    if count < 0:
        raise ParameterError("count must be nonnegative")
    return rng.choice(n_items, count)


def save_perturbation(path, p: Perturbation, extra: Optional[dict] = None) -> None:
    path = Path(path)
    values = np.asarray(p.values, dtype="<f4")
    if values.ndim != 3:
        raise ShapeError("perturbation must be (C, H, W)")
    c, h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(struct.pack("<III", c, h, w))
        fh.write(values.tobytes(order="C"))
    meta = {
        "eta": float(p.eta),
        "source_category": int(p.source_category),
        "target_category": int(p.target_category),
        "seed": int(p.seed),
    }
    meta.update(p.meta)
    if extra:
        meta.update(extra)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_perturbation(path) -> Perturbation:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a perturbation file")
    if raw[4] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {raw[4]}")
    c, h, w = struct.unpack("<III", raw[5:17])
    values = np.frombuffer(raw[17:], dtype="<f4")
    if values.size != c * h * w:
        raise ValueError(f"{path}: truncated payload")
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    known = {k: meta.pop(k) for k in ("eta", "source_category", "target_category", "seed")}
    return Perturbation(values.reshape(c, h, w).astype(np.float32), meta=meta, **known)
