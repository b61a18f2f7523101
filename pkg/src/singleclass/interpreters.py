"""CAM, gradient and mask attribution maps, plus their input-gradients.

Every map is a (H, W) array in [0, 1] after min-max normalization. The ``*_maps``
functions work on torch batches and stay differentiable with respect to the input,
which is what the attack needs for the interpretation loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .core import ParameterError, ShapeError

INTERPRETERS = ("cam", "grad", "mask")


class InterpreterError(RuntimeError):
    pass


@dataclass
class MaskConfig:
    lambda_m: float = 2e-3
    steps: int = 20
    step_size: float = 10.0
    blur_sigma: float = 3.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_m <= 0:
            raise ParameterError("lambda_m must be positive")
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.step_size <= 0:
            raise ParameterError("step_size must be positive")


def normalize_map(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def normalize_maps_t(raw: torch.Tensor) -> torch.Tensor:
    """Per-sample min-max over the last two dims; constant maps become zero."""
    flat = raw.flatten(1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (raw - lo) / safe, torch.zeros_like(raw))


def cam_from_activations(acts, weights) -> np.ndarray:
    """Raw class activation map ``sum_i w_i * a_i`` (no upsampling or scaling)."""
    acts = np.asarray(acts, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if acts.shape[0] != weights.shape[0]:
        raise ShapeError("one weight per channel required")
    return np.tensordot(weights, acts, axes=1)


def _labels(y, n):
    return torch.as_tensor(np.broadcast_to(np.asarray(y), (n,)).copy(), dtype=torch.int64)


def cam_maps(clf, x: torch.Tensor, y) -> torch.Tensor:
    net = clf.net_
    if not hasattr(net, "features") or not hasattr(net, "fc"):
        clf.class_weights(0)  # raises UnsupportedArchitectureError
    acts = net.features(x)
    w = net.fc.weight[_labels(y, len(x))]
    raw = torch.einsum("nc,nchw->nhw", w, acts)
    raw = F.interpolate(raw[:, None], size=x.shape[-2:], mode="bilinear", align_corners=False)[:, 0]
    return normalize_maps_t(raw)


def grad_raw(clf, x: torch.Tensor, y, create_graph=False) -> torch.Tensor:
    """Channel-max of |d logit_y / dx|, before normalization."""
    if not x.requires_grad:
        x = x.clone().requires_grad_(True)
    score = clf.net_(x).gather(1, _labels(y, len(x))[:, None]).sum()
    (g,) = torch.autograd.grad(score, x, create_graph=create_graph)
    return g.abs().amax(dim=1)


def grad_maps(clf, x, y, create_graph=False) -> torch.Tensor:
    return normalize_maps_t(grad_raw(clf, x, y, create_graph))


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(round(2 * sigma)))
    t = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    k = k / k.sum()
    c = x.shape[1]
    pad = min(radius, x.shape[-1] - 1, x.shape[-2] - 1)
    if pad < radius:
        k = k[radius - pad:radius + pad + 1]
        k = k / k.sum()
    out = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    out = F.conv2d(out, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(out, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def deletion(x: torch.Tensor, mask: torch.Tensor, cfg: MaskConfig) -> torch.Tensor:
    """mask=1 keeps the pixel, mask=0 replaces it by the blurred (optionally noised) image."""
    reference = gaussian_blur(x, cfg.blur_sigma)
    if cfg.noise_std > 0:
        gen = torch.Generator().manual_seed(cfg.seed)
        reference = reference + cfg.noise_std * torch.randn(x.shape[1:], generator=gen, dtype=x.dtype)
    m = mask[:, None]
    return m * x + (1 - m) * reference


def unrolled_mask(clf, x: torch.Tensor, y, cfg: MaskConfig, create_graph=False) -> torch.Tensor:
    """Projected gradient descent on the deletion mask from all-ones.

    Minimizes ``p_y(phi(x; mask)) + lambda_m * ||1 - mask||_1`` per sample. The l1
    term enters through its proximal step, which on ``mask <= 1`` is a constant
    push of ``step_size * lambda_m`` toward one followed by the clamp. With
    ``create_graph`` the steps stay on the autograd tape so the result can be
    differentiated with respect to ``x``.
    """
    n, _, h, w = x.shape
    labels = _labels(y, n)
    mask = torch.ones((n, h, w), dtype=x.dtype, requires_grad=True)
    for _ in range(cfg.steps):
        probs = F.softmax(clf.net_(deletion(x, mask, cfg)), dim=1)
        score = probs.gather(1, labels[:, None]).sum()
        if not torch.isfinite(score):
            raise InterpreterError("non-finite mask objective")
        (g,) = torch.autograd.grad(score, mask, create_graph=create_graph)
        mask = (mask - cfg.step_size * (g - cfg.lambda_m)).clamp(0.0, 1.0)
        if not create_graph:
            mask = mask.detach().requires_grad_(True)
    return mask


def mask_maps(clf, x, y, cfg: MaskConfig, create_graph=False) -> torch.Tensor:
    return normalize_maps_t(1 - unrolled_mask(clf, x, y, cfg, create_graph))


def differentiable_maps(clf, x: torch.Tensor, y, interpreter: str, mask_cfg=None) -> torch.Tensor:
    """Normalized maps on the autograd tape of ``x``.

    The gradient route runs on the smoothed-ReLU surrogate so its input-gradient is
    not identically zero; CAM and mask use exact ReLUs.
    """
    if interpreter == "cam":
        with clf.differentiable("exact"):
            return cam_maps(clf, x, y)
    if interpreter == "grad":
        with clf.differentiable("smoothed"):
            return grad_maps(clf, x, y, create_graph=True)
    if interpreter == "mask":
        with clf.differentiable("exact"):
            return mask_maps(clf, x, y, mask_cfg or MaskConfig(), create_graph=True)
    raise ParameterError(f"unknown interpreter {interpreter!r}")


def _batch(clf, X):
    X = np.asarray(X, dtype=np.float32)
    single = X.ndim == 3
    X = X[None] if single else X
    if X.shape[1:] != tuple(clf.input_shape_):
        raise ShapeError(f"expected image shape {clf.input_shape_}, got {X.shape[1:]}")
    return torch.from_numpy(X), single


def _finish(t, single):
    out = t.detach().numpy().astype(np.float64)
    return out[0] if single else out


def cam(clf, X, y) -> np.ndarray:
    xt, single = _batch(clf, X)
    with torch.no_grad(), clf.differentiable("exact"):
        return _finish(cam_maps(clf, xt, y), single)


def grad(clf, X, y, mode="exact") -> np.ndarray:
    xt, single = _batch(clf, X)
    with clf.differentiable(mode):
        return _finish(grad_maps(clf, xt, y), single)


def mask_interpret(clf, X, cfg: MaskConfig, y=None):
    """Return ``(attribution, mask)``; ``y`` defaults to the predicted category."""
    xt, single = _batch(clf, X)
    if y is None:
        y = clf.predict(xt.numpy())
    with clf.differentiable("exact"):
        mask = unrolled_mask(clf, xt, y, cfg)
    attribution = normalize_maps_t(1 - mask.detach())
    return _finish(attribution, single), _finish(mask, single)


def attribution(clf, X, y, interpreter: str, mask_cfg=None) -> np.ndarray:
    """Maps exactly as the deployed interpreter would show them."""
    if interpreter == "cam":
        return cam(clf, X, y)
    if interpreter == "grad":
        return grad(clf, X, y)
    if interpreter == "mask":
        return mask_interpret(clf, X, mask_cfg or MaskConfig(), y)[0]
    raise ParameterError(f"unknown interpreter {interpreter!r}")


def interpreter_gradient(clf, X, y, target_map, interpreter: str, lam: float = 1.0,
                         mask_cfg=None) -> np.ndarray:
    """``lam * d/dx ||g(x) - m_t||^2`` per sample."""
    xt, single = _batch(clf, X)
    targets = torch.as_tensor(np.asarray(target_map, dtype=np.float32))
    if single:
        targets = targets[None]
    if targets.shape != (len(xt),) + tuple(xt.shape[-2:]):
        raise ShapeError(f"target map shape {tuple(targets.shape)} does not match images")
    xt = xt.clone().requires_grad_(True)
    maps = differentiable_maps(clf, xt, y, interpreter, mask_cfg)
    loss = lam * ((maps - targets) ** 2).sum()
    (g,) = torch.autograd.grad(loss, xt)
    return _finish(g, single)


class _Interpreter(TransformerMixin, BaseEstimator):
    name = ""

    def fit(self, X=None, y=None):
        if not hasattr(self.estimator, "net_"):
            raise ParameterError("interpreter needs a fitted classifier")
        return self

    def transform(self, X, y=None):
        """Maps for categories ``y`` (default: the classifier's predictions)."""
        if y is None:
            y = self.estimator.predict(X)
        return attribution(self.estimator, X, y, self.name, self._mask_cfg())

    def _mask_cfg(self):
        return None


class CAMInterpreter(_Interpreter):
    name = "cam"

    def __init__(self, estimator):
        self.estimator = estimator


class GradInterpreter(_Interpreter):
    name = "grad"

    def __init__(self, estimator):
        self.estimator = estimator


class MaskInterpreter(_Interpreter):
    name = "mask"

    def __init__(self, estimator, lambda_m=2e-3, steps=20, step_size=10.0, blur_sigma=3.0,
                 noise_std=0.0, seed=0):
        self.estimator = estimator
        self.lambda_m = lambda_m
        self.steps = steps
        self.step_size = step_size
        self.blur_sigma = blur_sigma
        self.noise_std = noise_std
        self.seed = seed

    def _mask_cfg(self):
        return MaskConfig(self.lambda_m, self.steps, self.step_size, self.blur_sigma,
                          self.noise_std, self.seed)


def make_interpreter(name: str, estimator, **kwargs):
    classes = {"cam": CAMInterpreter, "grad": GradInterpreter, "mask": MaskInterpreter}
    if name not in classes:
        raise ParameterError(f"unknown interpreter {name!r}")
    return classes[name](estimator, **kwargs)
