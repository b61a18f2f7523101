"""Small CAM-compatible CNN classifiers behind a scikit-learn estimator interface.

The estimator doubles as the instrumented handle the interpreters and the attack
rely on: besides ``predict``/``predict_proba`` it exposes input gradients,
last-conv feature maps and the per-class weights of the linear head.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .core import LabeledDataset, ParameterError, RandomSource, ShapeError

ARCHITECTURES = {
    # (channels per conv block, pool after block?)
    "cnn-small": ((16, 32, 64), (True, True, False)),
    "cnn-wide": ((32, 48, 64, 96), (True, False, True, False)),
    "cnn-large": ((32, 64, 96, 128), (True, False, True, False)),
}


class TrainingError(RuntimeError):
    pass


class UnsupportedArchitectureError(TypeError):
    pass


def smoothed_relu_grad(z, tau: float = 1e-4, swap: bool = False):
    """Smooth stand-in for the ReLU derivative.

    ``z < 0 -> 1 + z / sqrt(z^2 + tau)`` and ``z >= 0 -> z / sqrt(z^2 + tau)``;
    ``swap`` exchanges the two branch conditions.
    """
    if tau <= 0:
        raise ParameterError("tau must be positive")
    z = np.asarray(z, dtype=np.float64)
    ratio = z / np.sqrt(z * z + tau)
    neg = z < 0
    if swap:
        neg = ~neg
    out = np.where(neg, 1.0 + ratio, ratio)
    return float(out) if out.ndim == 0 else out


def _surrogate(z: torch.Tensor, tau: float, swap: bool) -> torch.Tensor:
    # antiderivative of smoothed_relu_grad, continuous at 0 (value sqrt(tau))
    root = torch.sqrt(z * z + tau)
    lifted = tau / (root - z)  # == z + root, without cancellation for z << 0
    neg = z < 0
    if swap:
        neg = ~neg
    return torch.where(neg, lifted, root)


class SwitchableReLU(nn.Module):
    """Exact ReLU by default; the smoothed surrogate when ``tau`` is set."""

    def __init__(self):
        super().__init__()
        self.tau: Optional[float] = None
        self.swap = False

    def forward(self, z):
        if self.tau is None:
            return F.relu(z)
        return _surrogate(z, self.tau, self.swap)


@contextlib.contextmanager
def relu_mode(net: nn.Module, mode: str, tau: float = 1e-4, swap: bool = False):
    """Temporarily switch every SwitchableReLU in ``net``."""
    acts = [m for m in net.modules() if isinstance(m, SwitchableReLU)]
    saved = [(a.tau, a.swap) for a in acts]
    for a in acts:
        a.tau, a.swap = (tau, swap) if mode == "smoothed" else (None, False)
    try:
        yield net
    finally:
        for a, (t, s) in zip(acts, saved):
            a.tau, a.swap = t, s


class GAPNet(nn.Module):
    """Conv blocks -> global average pool -> one linear layer."""

    def __init__(self, widths, pools, num_categories, in_channels=3, bias=True):
        super().__init__()
        layers = []
        prev = in_channels
        for width, pool in zip(widths, pools):
            layers += [nn.Conv2d(prev, width, 3, padding=1, bias=False),
                       nn.BatchNorm2d(width, affine=bias), SwitchableReLU()]
            if pool:
                layers.append(nn.MaxPool2d(2))
            prev = width
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(prev, num_categories, bias=bias)

    def forward(self, x):
        return self.fc(self.features(x).mean(dim=(2, 3)))


def build_network(arch: str, num_categories: int, in_channels: int = 3, bias: bool = True,
                  seed: int = 0) -> GAPNet:
    if arch not in ARCHITECTURES:
        raise ParameterError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    widths, pools = ARCHITECTURES[arch]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return GAPNet(widths, pools, num_categories, in_channels, bias)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 0.1
    lr_final: float = 0.01
    lr_decay: str = "exponential"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ParameterError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.lr_decay not in ("exponential", "linear", "constant"):
            raise ParameterError(f"unknown lr_decay {self.lr_decay!r}")


def learning_rate(cfg, epoch: int) -> float:
    if cfg.lr_decay == "constant" or cfg.epochs == 1:
        return cfg.lr
    frac = epoch / (cfg.epochs - 1)
    if cfg.lr_decay == "linear":
        return cfg.lr + frac * (cfg.lr_final - cfg.lr)
    return cfg.lr * (cfg.lr_final / cfg.lr) ** frac


def momentum_sgd(net: nn.Module, X: torch.Tensor, y: torch.Tensor, cfg, batch_hook=None):
    """Momentum SGD over ``cfg.epochs``.

    Update rule: ``g <- mu*g - grad``; ``w <- w + lr*g``. An optional ``batch_hook``
    supplies ``offset(idx)`` (added to the batch inputs) and ``after_step(epoch, idx, net)``
    (run after each weight update). Without a hook this is plain training.
    """
    rng = RandomSource(cfg.seed).fork(7)
    params = [p for p in net.parameters()]
    velocity = [torch.zeros_like(p) for p in params]
    n = len(X)
    step = 0
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = rng.generator.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = X[idx]
            if batch_hook is not None:
                xb = xb + batch_hook.offset(idx)
            loss = F.cross_entropy(net(xb), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, iteration {step}")
            grads = torch.autograd.grad(loss, params)
            with torch.no_grad():
                for p, g, v in zip(params, grads, velocity):
                    if cfg.weight_decay:
                        g = g + cfg.weight_decay * p
                    v.mul_(cfg.momentum).sub_(g)
                    p.add_(lr * v)
            if batch_hook is not None:
                batch_hook.after_step(epoch, idx, net)
            step += 1
    return net


def _as_batch(X, shape=None) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float32)
    single = X.ndim == 3
    if single:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"expected (n, C, H, W) or (C, H, W), got {X.shape}")
    if shape is not None and X.shape[1:] != tuple(shape):
        raise ShapeError(f"expected image shape {tuple(shape)}, got {X.shape[1:]}")
    return X, single


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Desk-scale CNN with a global-average-pool + linear head.

    Parameters mirror :class:`TrainConfig` plus the architecture id and the ReLU
    backward mode used by :meth:`input_gradient` (``"exact"`` or ``"smoothed"``).
    """

    def __init__(self, arch="cnn-small", epochs=15, batch_size=32, lr=0.1, lr_final=0.01,
                 lr_decay="exponential", momentum=0.9, weight_decay=5e-4, seed=0,
                 relu_backward_mode="exact", tau=1e-4, swap_relu_branches=False, bias=True):
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_final = lr_final
        self.lr_decay = lr_decay
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed
        self.relu_backward_mode = relu_backward_mode
        self.tau = tau
        self.swap_relu_branches = swap_relu_branches
        self.bias = bias

    # construction ---------------------------------------------------------
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.lr_final, self.lr_decay,
                           self.momentum, self.weight_decay, self.seed)

    def initialize(self, input_shape, num_categories):
        """Allocate a freshly initialized network without training."""
        self.input_shape_ = tuple(input_shape)
        self.classes_ = np.arange(num_categories)
        self.net_ = build_network(self.arch, num_categories, input_shape[0], self.bias, self.seed)
        self.net_.eval()
        return self

    @classmethod
    def from_module(cls, module: nn.Module, input_shape, num_categories, **params):
        """Wrap an arbitrary module (toy models in tests, external nets)."""
        est = cls(arch="custom", **params)
        est.input_shape_ = tuple(input_shape)
        est.classes_ = np.arange(num_categories)
        est.net_ = module.eval()
        return est

    def fit(self, X, y, warm_start=False):
        cfg = self.train_config()
        X, _ = _as_batch(X)
        y = np.asarray(y, dtype=np.int64)
        if len(X) == 0:
            raise ParameterError("empty training set")
        if not (warm_start and hasattr(self, "net_")):
            num = int(max(y.max() + 1, len(getattr(self, "classes_", []))))
            self.initialize(X.shape[1:], num)
        self.net_.train()
        momentum_sgd(self.net_, torch.from_numpy(X), torch.from_numpy(y), cfg)
        self.net_.eval()
        return self

    # inference ------------------------------------------------------------
    @property
    def num_categories(self) -> int:
        return len(self.classes_)

    @property
    def last_conv_shape(self):
        check_is_fitted(self, "net_")
        if not hasattr(self.net_, "features"):
            raise UnsupportedArchitectureError("network has no conv feature extractor")
        with torch.no_grad():
            out = self.net_.features(torch.zeros((1,) + self.input_shape_))
        return tuple(out.shape[1:])

    def _tensor(self, X):
        check_is_fitted(self, "net_")
        X, single = _as_batch(X, self.input_shape_)
        return torch.from_numpy(X), single

    def decision_function(self, X, chunk=512):
        xt, single = self._tensor(X)
        with torch.no_grad(), relu_mode(self.net_, "exact"):
            out = torch.cat([self.net_(xt[i:i + chunk]) for i in range(0, len(xt), chunk)])
        out = out.numpy().astype(np.float64)
        return out[0] if single else out

    def predict_proba(self, X):
        logits = self.decision_function(X)
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=-1)

    def feature_maps(self, X):
        xt, single = self._tensor(X)
        if not hasattr(self.net_, "features"):
            raise UnsupportedArchitectureError("network has no conv feature extractor")
        with torch.no_grad(), relu_mode(self.net_, "exact"):
            out = self.net_.features(xt).numpy()
        return out[0] if single else out

    def class_weights(self, y: int) -> np.ndarray:
        check_is_fitted(self, "net_")
        fc = getattr(self.net_, "fc", None)
        if not isinstance(fc, nn.Linear) or not hasattr(self.net_, "features"):
            raise UnsupportedArchitectureError("CAM needs a global-average-pool + linear head")
        return fc.weight.detach()[int(y)].numpy().copy()

    def class_bias(self, y: int) -> float:
        fc = self.net_.fc
        return 0.0 if fc.bias is None else float(fc.bias.detach()[int(y)])

    @contextlib.contextmanager
    def differentiable(self, mode=None):
        """Yield the network with ReLUs switched to ``mode`` (default: the estimator's)."""
        check_is_fitted(self, "net_")
        mode = mode or self.relu_backward_mode
        with relu_mode(self.net_, mode, self.tau, self.swap_relu_branches) as net:
            yield net

    def input_gradient(self, X, target, kind="cross_entropy", mode=None):
        """Gradient of a per-sample scalar loss with respect to each input pixel.

        ``kind='cross_entropy'``: cross-entropy against ``target``;
        ``kind='class_score'``: the logit of ``target``.
        """
        if kind not in ("cross_entropy", "class_score"):
            raise ParameterError(f"unknown loss kind {kind!r}")
        xt, single = self._tensor(X)
        target = torch.as_tensor(np.broadcast_to(np.asarray(target), (len(xt),)).copy(),
                                 dtype=torch.int64)
        xt = xt.clone().requires_grad_(True)
        with self.differentiable(mode) as net:
            logits = net(xt)
            if kind == "cross_entropy":
                loss = F.cross_entropy(logits, target, reduction="sum")
            else:
                loss = logits.gather(1, target[:, None]).sum()
            (g,) = torch.autograd.grad(loss, xt)
        g = g.numpy()
        return g[0] if single else g

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.net_.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().numpy().tobytes())
        return h.hexdigest()

    def copy(self) -> "CNNClassifier":
        other = type(self)(**self.get_params())
        other.input_shape_ = self.input_shape_
        other.classes_ = self.classes_.copy()
        if self.arch in ARCHITECTURES:
            other.net_ = build_network(self.arch, len(self.classes_), self.input_shape_[0],
                                       self.bias, self.seed)
            other.net_.load_state_dict(self.net_.state_dict())
        else:
            import copy
            other.net_ = copy.deepcopy(self.net_)
        other.net_.eval()
        for attr in ("heldout_accuracy_", "manifest_"):
            if hasattr(self, attr):
                setattr(other, attr, getattr(self, attr))
        return other


def train_classifier(data: LabeledDataset, cfg: TrainConfig, arch: str = "cnn-small",
                     heldout: Optional[LabeledDataset] = None, holdout_fraction: float = 0.1,
                     init: Optional[CNNClassifier] = None, **params) -> CNNClassifier:
    """Train (or continue training ``init``) and record held-out accuracy.

    Without ``heldout`` a deterministic ``holdout_fraction`` of ``data`` is set aside.
    """
    if data.split != "train":
        raise ParameterError("train_classifier needs the train split")
    if len(data) == 0:
        raise ParameterError("empty training set")
    if heldout is None:
        perm = RandomSource(cfg.seed).fork(3).generator.permutation(len(data))
        k = max(1, int(round(holdout_fraction * len(data))))
        heldout, data = data.subset(np.sort(perm[:k])), data.subset(np.sort(perm[k:]))
    if init is not None:
        clf = init.copy()
        clf.set_params(**asdict(cfg))
        clf.fit(data.images, data.labels, warm_start=True)
    else:
        clf = CNNClassifier(arch=arch, **asdict(cfg), **params)
        clf.initialize(data.image_shape, data.num_categories)
        clf.fit(data.images, data.labels, warm_start=True)
    clf.heldout_accuracy_ = float(clf.score(heldout.images, heldout.labels))
    return clf


# checkpoints --------------------------------------------------------------
CKPT_MAGIC = b"SCKP"
CKPT_VERSION = 1


def save_checkpoint(path, clf: CNNClassifier, extra: Optional[dict] = None) -> None:
    """Binary parameter file plus a JSON manifest next to it."""
    path = Path(path)
    state = clf.net_.state_dict()
    header = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + bytes([CKPT_VERSION]))
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        for v in state.values():
            fh.write(v.detach().numpy().astype("<f4").tobytes())
    manifest = {
        "architecture": clf.arch,
        "num_categories": int(clf.num_categories),
        "input_shape": list(clf.input_shape_),
        "training_seed": int(clf.seed),
        "accuracy": getattr(clf, "heldout_accuracy_", None),
        "params": clf.get_params(),
        "checksum": clf.checksum(),
    }
    manifest.update(extra or {})
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> CNNClassifier:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if raw[4] != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {raw[4]}")
    (n,) = struct.unpack("<I", raw[5:9])
    header = json.loads(raw[9:9 + n])
    manifest = json.loads(Path(str(path) + ".json").read_text())
    clf = CNNClassifier(**manifest["params"])
    clf.initialize(tuple(manifest["input_shape"]), manifest["num_categories"])
    offset = 9 + n
    state = {}
    for entry in header:
        count = math.prod(entry["shape"])
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
        offset += 4 * count
    clf.net_.load_state_dict(state)
    clf.net_.eval()
    if manifest.get("accuracy") is not None:
        clf.heldout_accuracy_ = manifest["accuracy"]
    clf.manifest_ = manifest
    return clf
