"""Input-preprocessing defenses, their chains, and interpretation-masked adversarial training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .core import LabeledDataset, ParameterError, RandomSource, ShapeError
from .metrics import binarize
from .models import CNNClassifier, TrainConfig, momentum_sgd


def bit_depth_reduce(x, bits: int = 4) -> np.ndarray:
    if not 1 <= bits <= 8:
        raise ParameterError("bits must be in [1, 8]")
    levels = 2 ** bits - 1
    x = np.asarray(x)
    return (np.round(x * levels) / levels).astype(x.dtype, copy=False)


def median_smooth(x, kernel: int = 3) -> np.ndarray:
    """Per-channel sliding median; borders mirror without repeating the edge pixel."""
    if kernel < 3 or kernel % 2 == 0:
        raise ParameterError("kernel must be odd and >= 3")
    x = np.asarray(x)
    if kernel > min(x.shape[-2:]):
        raise ParameterError("kernel larger than image")
    size = (1,) * (x.ndim - 2) + (kernel, kernel)
    return ndimage.median_filter(x, size=size, mode="mirror")


def random_resize_pad(x, scale_range=(0.8, 1.0), rng: Optional[RandomSource] = None) -> np.ndarray:
    """Shrink each image by a random factor and paste it at a random offset on a zero canvas."""
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise ParameterError("scale range must lie in (0, 1]")
    rng = rng or RandomSource(0)
    x = np.asarray(x)
    single = x.ndim == 3
    batch = x[None] if single else x
    _, c, h, w = batch.shape
    out = np.zeros_like(batch)
    for k, img in enumerate(batch):
        s = rng.uniform(lo, hi)
        nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        small = F.interpolate(torch.from_numpy(np.ascontiguousarray(img[None], dtype=np.float32)),
                              size=(nh, nw), mode="bilinear", align_corners=False)[0].numpy()
        top = int(rng.integers(0, h - nh + 1))
        left = int(rng.integers(0, w - nw + 1))
        out[k, :, top:top + nh, left:left + nw] = small
    return out[0] if single else out


class BitDepthReduction(TransformerMixin, BaseEstimator):
    def __init__(self, bits=4):
        self.bits = bits

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return bit_depth_reduce(X, self.bits)


class MedianSmoothing(TransformerMixin, BaseEstimator):
    def __init__(self, kernel=3):
        self.kernel = kernel

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return median_smooth(X, self.kernel)


class RandomResizePad(TransformerMixin, BaseEstimator):
    """Randomness is re-seeded from ``seed`` on every call, so equal inputs give equal outputs."""

    def __init__(self, scale_range=(0.8, 1.0), seed=0):
        self.scale_range = scale_range
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return random_resize_pad(X, tuple(self.scale_range), RandomSource(self.seed))


TRANSFORMS = {"bit_depth": BitDepthReduction, "median": MedianSmoothing,
              "resize_pad": RandomResizePad}


class DefenseChain(TransformerMixin, BaseEstimator):
    """Left-to-right composition of preprocessing transforms.

    ``steps`` is a list of ``(name, params)`` pairs with names from
    ``bit_depth``, ``median`` and ``resize_pad``.
    """

    def __init__(self, steps=(("bit_depth", {}), ("median", {})), seed=0):
        self.steps = steps
        self.seed = seed

    def _transforms(self):
        if len(self.steps) == 0:
            raise ParameterError("a defense chain needs at least one transform")
        out = []
        for k, (name, params) in enumerate(self.steps):
            if name not in TRANSFORMS:
                raise ParameterError(f"unknown defense {name!r}")
            params = dict(params or {})
            if name == "resize_pad":
                params.setdefault("seed", self.seed + k)
            out.append(TRANSFORMS[name](**params))
        return out

    def fit(self, X=None, y=None):
        self._transforms()
        return self

    def transform(self, X):
        for t in self._transforms():
            X = t.transform(X)
        return X

    @property
    def name(self):
        return "+".join(name for name, _ in self.steps)


def apply_chain(x, chain: DefenseChain):
    return chain.transform(x)


# paired chains compared in the evaluation, in their listed order
PAIRED_CHAINS = (
    (("bit_depth", {"bits": 4}), ("median", {"kernel": 3})),
    (("median", {"kernel": 3}), ("resize_pad", {"scale_range": (0.8, 1.0)})),
    (("resize_pad", {"scale_range": (0.8, 1.0)}), ("bit_depth", {"bits": 4})),
)


# --- adversarial training -------------------------------------------------------

@dataclass
class AdvTrainConfig:
    epsilon: float = 0.031
    lr: float = 0.1
    lr_final: float = 0.001
    lr_decay: str = "exponential"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    threshold: float = 0.3
    epochs: int = 500
    batch_size: int = 128
    norm: str = "linf"
    radius: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ParameterError("epsilon must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must be in [0, 1)")
        if self.norm != "linf":
            raise ParameterError("only the l-inf ball is supported")
        if not 0 < self.threshold < 1:
            raise ParameterError("binarization threshold must be in (0, 1)")

    @property
    def ball_radius(self) -> float:
        return self.epsilon if self.radius is None else self.radius

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.lr_final, self.lr_decay,
                           self.momentum, self.weight_decay, self.seed)


# settings used for CIFAR-10 scale runs; the reduced preset fits a desk-scale budget
ADV_TRAIN_PRESETS = {
    "cifar10": dict(epsilon=0.031, batch_size=128, lr=0.1, lr_final=0.001, epochs=500),
    "imagenet-finetune": dict(epsilon=0.04, batch_size=32, lr=0.1, lr_final=0.001, epochs=100),
    "reduced": dict(epsilon=0.05, batch_size=32, lr=0.02, lr_final=0.002, epochs=6),
}


class _MaskedUniversalPerturbation:
    """One shared perturbation, masked by binarized maps and refined after every weight step."""

    def __init__(self, shape, masks, cfg: AdvTrainConfig, X, y):
        self.delta = torch.zeros(shape)
        self.masks = masks
        self.cfg = cfg
        self.X, self.y = X, y
        self.max_abs = []

    def offset(self, idx):
        return self.masks[idx] * self.delta

    def after_step(self, epoch, idx, net):
        if self.cfg.epsilon == 0:
            self.max_abs.append(0.0)
            return
        delta = self.delta.clone().requires_grad_(True)
        # same batch statistics as the weight step, but running stats must not move twice
        saved = [b.clone() for b in net.buffers()]
        loss = F.cross_entropy(net(self.X[idx] + self.masks[idx] * delta), self.y[idx])
        if not torch.isfinite(loss):
            raise ParameterError(f"non-finite loss in epoch {epoch}")
        (g,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            for b, s in zip(net.buffers(), saved):
                b.copy_(s)
        r = self.cfg.ball_radius
        with torch.no_grad():
            self.delta = (self.delta + self.cfg.epsilon * g.sign()).clamp(-r, r)
        self.max_abs.append(float(self.delta.abs().max()))


def adversarial_train(clf: CNNClassifier, data: LabeledDataset, maps, cfg: AdvTrainConfig):
    """Fine-tune a copy of ``clf`` against a universal perturbation confined to salient areas.

    ``maps`` are per-sample attribution maps aligned with ``data``; they are binarized
    at ``cfg.threshold`` and broadcast over channels. Returns ``(hardened, delta)``.
    """
    maps = np.asarray(maps)
    if len(maps) != len(data):
        raise ParameterError("one attribution map per training sample required")
    if maps.shape[1:] != data.image_shape[1:]:
        raise ShapeError("attribution maps must match the image spatial shape")
    masks = torch.from_numpy(np.stack([binarize(m, cfg.threshold) for m in maps])
                             .astype(np.float32))[:, None]
    X = torch.from_numpy(data.images)
    y = torch.from_numpy(data.labels)
    hardened = clf.copy()
    hardened.set_params(**{k: v for k, v in vars(cfg.train_config()).items()})
    hook = _MaskedUniversalPerturbation(data.image_shape, masks, cfg, X, y)
    hardened.net_.train()
    try:
        momentum_sgd(hardened.net_, X, y, cfg.train_config(), batch_hook=hook)
    finally:
        hardened.net_.eval()
    hardened.delta_trace_ = hook.max_abs
    return hardened, hook.delta.numpy()
