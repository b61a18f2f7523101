"""Single-class universal perturbation by moment-based stochastic optimization.

Each iteration draws half a batch from the source category and half from the other
categories, takes input-gradients of the prediction loss (toward the target for
source samples, toward the true label otherwise) plus the weighted interpretation
loss, mixes the two expectations with the norm ratio, feeds the result through
bias-corrected first/second moment estimates and takes an l-inf normalized step,
followed by projection onto the ``eta`` ball.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .core import (LabeledDataset, ParameterError, Perturbation, RandomSource,
                   apply_perturbation, batch_sample)
from .interpreters import INTERPRETERS, MaskConfig, attribution, differentiable_maps
from .metrics import batch_iou

logger = logging.getLogger(__name__)


class DegenerateStepWarning(RuntimeWarning):
    pass


class AttackError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class AttackConfig:
    target: int
    eta: float = 0.05
    lam: float = 0.01
    batch_size: int = 32
    gamma: float = 0.6
    beta1: float = 0.9
    beta2: float = 0.999
    max_iter: int = 5000
    check_interval: int = 50
    interpreter: str = "cam"
    val_fraction: float = 0.2
    seed: int = 0
    mask: MaskConfig = field(default_factory=MaskConfig)

    def __post_init__(self):
        if isinstance(self.mask, dict):
            self.mask = MaskConfig(**self.mask)
        if self.eta <= 0:
            raise ParameterError("eta must be positive")
        if self.lam < 0:
            raise ParameterError("lam must be nonnegative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ParameterError("batch_size must be even and >= 2")
        if not 0 < self.gamma <= 1:
            raise ParameterError("gamma must be in (0, 1]")
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ParameterError("need 0 < beta1 < beta2 < 1")
        if self.max_iter < 0 or self.check_interval < 1:
            raise ParameterError("max_iter >= 0 and check_interval >= 1 required")
        if self.interpreter not in INTERPRETERS:
            raise ParameterError(f"unknown interpreter {self.interpreter!r}")
        if not 0 < self.val_fraction < 1:
            raise ParameterError("val_fraction must be in (0, 1)")


@dataclass
class MomentState:
    upsilon: np.ndarray
    omega: np.ndarray
    i: int = 0

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), 0)


@dataclass
class TraceRow:
    iteration: int
    fooling_ratio: float
    l_prd_mean: float
    l_int_mean: float
    delta: float
    p_inf_norm: float


@dataclass
class AttackTrace:
    rows: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    converged: bool = False

    COLUMNS = ("iteration", "fooling_ratio", "L_prd_mean", "L_int_mean", "delta", "p_inf_norm")

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        attr = {"L_prd_mean": "l_prd_mean", "L_int_mean": "l_int_mean"}.get(name, name)
        return np.array([getattr(r, attr) for r in self.rows])

    def write_csv(self, path, extra=None):
        """``extra`` adds constant columns (e.g. provenance) to every row."""
        extra = dict(sorted((extra or {}).items()))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.COLUMNS) + list(extra))
            for r in self.rows:
                w.writerow([r.iteration] + [repr(float(v)) for v in
                           (r.fooling_ratio, r.l_prd_mean, r.l_int_mean, r.delta, r.p_inf_norm)]
                           + list(extra.values()))


# --- algebra -----------------------------------------------------------------

def prediction_loss(probs, y) -> np.ndarray:
    """Cross-entropy ``-log p_y`` of probability vectors (batched or single)."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y)
    if probs.ndim == 1:
        return float(-np.log(probs[int(y)]))
    return -np.log(probs[np.arange(len(probs)), np.broadcast_to(y, (len(probs),))])


def interpretation_loss(m, m_t) -> float:
    m = np.asarray(m, dtype=np.float64)
    m_t = np.asarray(m_t, dtype=np.float64)
    if m.shape != m_t.shape:
        raise ParameterError(f"map shapes differ: {m.shape} vs {m_t.shape}")
    return float(((m - m_t) ** 2).sum())


def _row_norms(grads) -> np.ndarray:
    g = np.asarray(grads, dtype=np.float64)
    return np.sqrt((g.reshape(len(g), -1) ** 2).sum(axis=1))


def gradient_ratio(source_grads, nonsource_grads) -> float:
    """Mean l2 norm of source gradients over mean l2 norm of non-source gradients."""
    if len(source_grads) == 0 or len(nonsource_grads) == 0:
        raise ParameterError("gradient lists must be non-empty")
    num = _row_norms(source_grads).mean()
    den = _row_norms(nonsource_grads).mean()
    if den == 0:
        warnings.warn("zero non-source gradient norm; delta clamped to 1", DegenerateStepWarning)
        return 1.0
    return float(num / den)


def combined_gradient(source_grads, nonsource_grads, delta: float) -> np.ndarray:
    s = np.asarray(source_grads, dtype=np.float64).mean(axis=0)
    o = np.asarray(nonsource_grads, dtype=np.float64).mean(axis=0)
    return 0.5 * (s + delta * o)


def moment_update(state: MomentState, xi, beta1=0.9, beta2=0.999) -> MomentState:
    xi = np.asarray(xi, dtype=np.float64)
    return MomentState(beta1 * state.upsilon + (1 - beta1) * xi,
                       beta2 * state.omega + (1 - beta2) * (xi * xi),
                       state.i)


def bias_corrected_step(state: MomentState, beta1=0.9, beta2=0.999) -> np.ndarray:
    if state.i < 1:
        raise ParameterError("bias correction needs i >= 1")
    if np.any(state.omega < 0):
        raise ParameterError("second moment has negative entries")
    factor = math.sqrt(1 - beta2 ** state.i) / (1 - beta1 ** state.i)
    root = np.sqrt(state.omega)
    out = np.zeros_like(state.upsilon)
    nz = root > 0
    out[nz] = factor * state.upsilon[nz] / root[nz]
    return out


def normalized_update(p, p_bar) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    p_bar = np.asarray(p_bar, dtype=np.float64)
    scale = np.abs(p_bar).max() if p_bar.size else 0.0
    if scale == 0:
        warnings.warn("all-zero step; update skipped", DegenerateStepWarning)
        return p.copy()
    return p + p_bar / scale


def project_linf(p, eta: float) -> np.ndarray:
    if eta <= 0:
        raise ParameterError("eta must be positive")
    p = np.asarray(p, dtype=np.float64)
    return np.sign(p) * np.minimum(np.abs(p), eta)


def to_float32_within(p, eta: float) -> np.ndarray:
    """Cast to float32 without rounding any entry past the budget."""
    v = np.asarray(p, dtype=np.float32)
    cap = np.float32(eta)
    if float(cap) > eta:
        cap = np.nextafter(cap, np.float32(0))
    return np.clip(v, -cap, cap)


# --- loop --------------------------------------------------------------------

def total_gradients(clf, x: np.ndarray, labels, map_labels, target_maps, lam, interpreter,
                    mask_cfg=None):
    """Per-sample ``d/dx [L_prd + lam * L_int]`` plus the two loss vectors."""
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).requires_grad_(True)
    labels_t = torch.as_tensor(labels, dtype=torch.int64)
    with clf.differentiable("exact") as net:
        l_prd = F.cross_entropy(net(xt), labels_t, reduction="none")
    total = l_prd.sum()
    l_int = torch.zeros_like(l_prd)
    if lam > 0:
        maps = differentiable_maps(clf, xt, map_labels, interpreter, mask_cfg)
        l_int = ((maps - torch.from_numpy(np.asarray(target_maps, np.float32))) ** 2).sum(dim=(1, 2))
        total = total + lam * l_int.sum()
    if not torch.isfinite(total):
        raise AttackError("non-finite attack loss")
    (g,) = torch.autograd.grad(total, xt)
    return g.numpy().astype(np.float64), l_prd.detach().numpy(), l_int.detach().numpy()


def validation_split(n: int, cfg: AttackConfig):
    """Deterministic ``(validation, optimization)`` index split of ``n`` source samples."""
    perm = RandomSource(cfg.seed).fork(1).generator.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    if n_val >= n:
        raise ParameterError("source set too small to hold out a validation split")
    return np.sort(perm[:n_val]), np.sort(perm[n_val:])


def fooling_fraction(clf, images, p, target) -> float:
    return float(np.mean(clf.predict(apply_perturbation(images, p)) == target))


def generate_universal_perturbation(clf, source: LabeledDataset, nonsource: LabeledDataset,
                                    cfg: AttackConfig, interpreter: Optional[str] = None,
                                    source_maps=None, nonsource_maps=None):
    """Run the optimization; returns ``(Perturbation, AttackTrace)``.

    ``source`` must hold one category different from ``cfg.target``; ``nonsource``
    must exclude it. Benign maps (each sample's own interpretation) are computed
    unless supplied. A deterministic ``cfg.val_fraction`` of ``source`` is held out
    to evaluate the stopping rule every ``cfg.check_interval`` iterations.
    """
    interpreter = interpreter or cfg.interpreter
    if len(source) == 0 or len(nonsource) == 0:
        raise ParameterError("source and non-source sets must be non-empty")
    cats = np.unique(source.labels)
    if len(cats) != 1:
        raise ParameterError("source samples must share one category")
    y_s = int(cats[0])
    if y_s == cfg.target:
        raise ParameterError("source category equals target category")
    if np.any(nonsource.labels == y_s):
        raise ParameterError("non-source set contains source-category samples")

    rng = RandomSource(cfg.seed)
    shape = source.image_shape
    if cfg.max_iter == 0:
        return Perturbation.zeros(shape, cfg.eta, y_s, cfg.target, cfg.seed), AttackTrace()

    val_idx, pool_idx = validation_split(len(source), cfg)
    if source_maps is None:
        source_maps = attribution(clf, source.images, y_s, interpreter, cfg.mask)
    if nonsource_maps is None:
        nonsource_maps = attribution(clf, nonsource.images, nonsource.labels, interpreter, cfg.mask)
    X_s, M_s = source.images[pool_idx], np.asarray(source_maps)[pool_idx]
    X_v = source.images[val_idx]
    X_o, Y_o, M_o = nonsource.images, nonsource.labels, np.asarray(nonsource_maps)
    half = cfg.batch_size // 2
    if half > len(X_s) or half > len(X_o):
        raise ParameterError("batch size exceeds available samples")

    draw = rng.fork(2)
    p = np.zeros(shape)
    state = MomentState.zeros(shape)
    trace = AttackTrace()
    best_fr, best_p = -1.0, p.copy()
    for _ in range(cfg.max_iter):
        i_s = batch_sample(len(X_s), half, draw)
        i_o = batch_sample(len(X_o), half, draw)
        S_x = np.clip(X_s[i_s] - p, 0.0, 1.0)
        S_o = np.clip(X_o[i_o] - p, 0.0, 1.0)
        state.i += 1
        g_s, lp_s, li_s = total_gradients(clf, S_x, np.full(half, cfg.target), cfg.target,
                                          M_s[i_s], cfg.lam, interpreter, cfg.mask)
        g_o, lp_o, li_o = total_gradients(clf, S_o, Y_o[i_o], Y_o[i_o], M_o[i_o], cfg.lam,
                                          interpreter, cfg.mask)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateStepWarning)
            delta = gradient_ratio(g_s, g_o)
            xi = combined_gradient(g_s, g_o, delta)
            state = moment_update(state, xi, cfg.beta1, cfg.beta2)
            p_bar = bias_corrected_step(state, cfg.beta1, cfg.beta2)
            p = project_linf(normalized_update(p, p_bar), cfg.eta)
        trace.warnings += [f"iteration {state.i}: {w.message}" for w in caught]

        fr = math.nan
        if state.i % cfg.check_interval == 0 or state.i == cfg.max_iter:
            fr = fooling_fraction(clf, X_v, p, cfg.target)
            if fr > best_fr:
                best_fr, best_p = fr, p.copy()
        l_prd = float(np.concatenate([lp_s, lp_o]).mean())
        l_int = float(np.concatenate([li_s, li_o]).mean())
        trace.rows.append(TraceRow(state.i, fr, l_prd, l_int, delta, float(np.abs(p).max())))
        if not (math.isfinite(l_prd) and math.isfinite(l_int)):
            raise AttackError(f"non-finite loss at iteration {state.i}", trace)
        if fr >= cfg.gamma:
            trace.converged = True
            break

    final = p if trace.converged else best_p
    if not trace.converged:
        logger.info("attack did not reach gamma=%.2f; best validation fooling ratio %.3f",
                    cfg.gamma, best_fr)
    pert = Perturbation(to_float32_within(final, cfg.eta), cfg.eta, y_s, cfg.target, cfg.seed,
                        meta={"iterations": state.i, "converged": trace.converged,
                              "interpreter": interpreter, "lambda": cfg.lam})
    return pert, trace


LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class LambdaTrial:
    lam: float
    converged: bool
    val_fooling_ratio: float
    val_iou: float


def select_lambda(clf, source: LabeledDataset, nonsource: LabeledDataset, cfg: AttackConfig,
                  grid=LAMBDA_GRID):
    """Run the attack once per ``lam`` in ``grid`` and keep the best.

    Among converged runs the highest validation IoU wins; if none converged, the
    highest validation fooling ratio. Returns ``(perturbation, trace, trials)``
    where ``trials`` lists one :class:`LambdaTrial` per grid point.
    """
    if not grid:
        raise ParameterError("lambda grid is empty")
    y_s = int(source.labels[0])
    source_maps = attribution(clf, source.images, y_s, cfg.interpreter, cfg.mask)
    nonsource_maps = attribution(clf, nonsource.images, nonsource.labels, cfg.interpreter, cfg.mask)
    val_idx, _ = validation_split(len(source), cfg)
    X_v, M_v = source.images[val_idx], source_maps[val_idx]
    trials, runs = [], []
    for lam in grid:
        p, trace = generate_universal_perturbation(clf, source, nonsource, replace(cfg, lam=lam),
                                                   source_maps=source_maps,
                                                   nonsource_maps=nonsource_maps)
        adv = apply_perturbation(X_v, p.values)
        adv_maps = attribution(clf, adv, clf.predict(adv), cfg.interpreter, cfg.mask)
        trial = LambdaTrial(float(lam), trace.converged,
                            fooling_fraction(clf, X_v, p.values, cfg.target),
                            batch_iou(adv_maps, M_v)[0])
        logger.info("lambda %g: converged=%s val fooling %.3f val IoU %.3f", lam,
                    trial.converged, trial.val_fooling_ratio, trial.val_iou)
        trials.append(trial)
        runs.append((p, trace))
    if any(t.converged for t in trials):
        key = lambda k: (trials[k].converged, trials[k].val_iou)
    else:
        key = lambda k: trials[k].val_fooling_ratio
    best = max(range(len(trials)), key=key)
    p, trace = runs[best]
    p.meta["lambda_trials"] = [asdict(t) for t in trials]
    return p, trace, trials


class SingleClassUniversalPerturbation(TransformerMixin, BaseEstimator):
    """Learn one perturbation that moves ``source`` samples to ``target``.

    ``fit(X, y)`` takes a labelled pool: samples labelled ``source`` form the source
    set, all others the non-source set. ``transform`` applies the learned
    perturbation (``clip(x - p)``).
    """

    def __init__(self, estimator, source=0, target=1, interpreter="cam", eta=0.05, lam=0.01,
                 batch_size=32, gamma=0.6, beta1=0.9, beta2=0.999, max_iter=5000,
                 check_interval=50, val_fraction=0.2, seed=0, mask_params=None):
        self.estimator = estimator
        self.source = source
        self.target = target
        self.interpreter = interpreter
        self.eta = eta
        self.lam = lam
        self.batch_size = batch_size
        self.gamma = gamma
        self.beta1 = beta1
        self.beta2 = beta2
        self.max_iter = max_iter
        self.check_interval = check_interval
        self.val_fraction = val_fraction
        self.seed = seed
        self.mask_params = mask_params

    def config(self) -> AttackConfig:
        return AttackConfig(self.target, self.eta, self.lam, self.batch_size, self.gamma,
                            self.beta1, self.beta2, self.max_iter, self.check_interval,
                            self.interpreter, self.val_fraction, self.seed,
                            MaskConfig(**(self.mask_params or {})))

    def fit(self, X, y):
        y = np.asarray(y)
        data = LabeledDataset(X, y, int(max(y.max() + 1, self.estimator.num_categories)))
        self.perturbation_, self.trace_ = generate_universal_perturbation(
            self.estimator, data.of_category(self.source), data.excluding(self.source),
            self.config())
        self.converged_ = self.trace_.converged
        self.n_iter_ = len(self.trace_)
        return self

    def transform(self, X):
        return apply_perturbation(np.asarray(X, dtype=np.float32), self.perturbation_)
