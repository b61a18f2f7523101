"""Classifier-side rates, IoU of binarized maps, and qualitative grids."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import LabeledDataset, ParameterError, ShapeError, apply_perturbation
from .data import save_png
from .interpreters import attribution

THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


def eligible(clf, data: LabeledDataset, min_confidence: float = 0.6) -> LabeledDataset:
    """Samples classified correctly with at least ``min_confidence``."""
    if len(data) == 0:
        return data
    probs = clf.predict_proba(data.images)
    idx = np.arange(len(data))
    ok = (probs.argmax(axis=1) == data.labels) & (probs[idx, data.labels] >= min_confidence)
    return data.subset(np.flatnonzero(ok))


def _values(p):
    return getattr(p, "values", p)


def _perturbed_probs(clf, p, images, preprocess=None):
    x = apply_perturbation(images, _values(p))
    if preprocess is not None:
        x = preprocess(x)
    return clf.predict_proba(x)


# --- rates from probability arrays (pure) ---------------------------------------

def fooling_ratio_from_probs(probs, target) -> float:
    probs = np.asarray(probs)
    if len(probs) == 0:
        raise ParameterError("empty sample set")
    return float(np.mean(probs.argmax(axis=1) == target))


def any_flip_ratio_from_probs(probs, labels) -> float:
    probs = np.asarray(probs)
    if len(probs) == 0:
        raise ParameterError("empty sample set")
    return float(np.mean(probs.argmax(axis=1) != np.asarray(labels)))


def misclassification_confidence_from_probs(probs, target) -> Optional[float]:
    """Mean target probability over samples predicted as ``target``; None when none are."""
    probs = np.asarray(probs, dtype=np.float64)
    fooled = probs.argmax(axis=1) == target
    if not fooled.any():
        return None
    return float(probs[fooled, target].mean())


def classification_confidence_from_probs(probs, labels) -> dict:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    true_p = probs[np.arange(len(probs)), labels]
    return {int(c): float(true_p[labels == c].mean()) for c in np.unique(labels)}


def leakage_rate_from_probs(probs, labels) -> float:
    probs = np.asarray(probs)
    if len(probs) == 0:
        raise ParameterError("empty sample set")
    return float(np.mean(probs.argmax(axis=1) != np.asarray(labels)))


# --- rates against a model ------------------------------------------------------

def fooling_ratio(clf, p, source: LabeledDataset, target: int, preprocess=None) -> float:
    if len(source) == 0:
        raise ParameterError("empty sample set")
    return fooling_ratio_from_probs(_perturbed_probs(clf, p, source.images, preprocess), target)


def misclassification_confidence(clf, p, source: LabeledDataset, target: int,
                                 preprocess=None) -> Optional[float]:
    if len(source) == 0:
        return None
    probs = _perturbed_probs(clf, p, source.images, preprocess)
    return misclassification_confidence_from_probs(probs, target)


def classification_confidence(clf, p, nonsource: LabeledDataset, preprocess=None) -> dict:
    """Per-category mean true-class probability, benign and perturbed."""
    benign = clf.predict_proba(nonsource.images)
    perturbed = _perturbed_probs(clf, p, nonsource.images, preprocess)
    return {"benign": classification_confidence_from_probs(benign, nonsource.labels),
            "perturbed": classification_confidence_from_probs(perturbed, nonsource.labels)}


def leakage_rate(clf, p, nonsource: LabeledDataset, preprocess=None) -> float:
    if len(nonsource) == 0:
        raise ParameterError("empty sample set")
    probs = _perturbed_probs(clf, p, nonsource.images, preprocess)
    return leakage_rate_from_probs(probs, nonsource.labels)


# --- interpreter side -----------------------------------------------------------

def binarize(m, t: float) -> np.ndarray:
    """1 where the map is strictly above ``t``."""
    if not 0 < t < 1:
        raise ParameterError("threshold must be in (0, 1)")
    return (np.asarray(m) > t).astype(np.uint8)


def iou(m, m_benign, thresholds=THRESHOLDS):
    """Mean and per-threshold IoU of binarized maps; an empty union counts as 1."""
    m = np.asarray(m)
    m_benign = np.asarray(m_benign)
    if m.shape != m_benign.shape:
        raise ShapeError(f"map shapes differ: {m.shape} vs {m_benign.shape}")
    per = []
    for t in thresholds:
        a, b = binarize(m, t).astype(bool), binarize(m_benign, t).astype(bool)
        union = np.logical_or(a, b).sum()
        per.append(1.0 if union == 0 else np.logical_and(a, b).sum() / union)
    per = np.array(per, dtype=np.float64)
    return float(per.mean()), per


def batch_iou(maps, benign_maps, thresholds=THRESHOLDS):
    """IoU per sample, averaged: returns ``(mean, per-threshold mean vector)``."""
    per = np.array([iou(a, b, thresholds)[1] for a, b in zip(maps, benign_maps)])
    if len(per) == 0:
        raise ParameterError("no maps to compare")
    curve = per.mean(axis=0)
    return float(curve.mean()), curve


# --- report ---------------------------------------------------------------------

@dataclass
class EvaluationReport:
    model: str
    interpreter: str
    source: int
    target: int
    fooling_ratio: float
    any_flip_ratio: float
    misclassification_confidence: Optional[float]
    classification_confidence: dict
    leakage_rate: float
    iou_mean: float
    iou_per_threshold: list
    n_source: int
    n_nonsource: int
    extra: dict = field(default_factory=dict)

    CSV_FIELDS = ("model", "interpreter", "source", "target", "fooling_ratio", "any_flip_ratio",
                  "misclassification_confidence", "leakage_rate", "iou_mean", "n_source",
                  "n_nonsource")

    def to_dict(self):
        d = asdict(self)
        d["classification_confidence"] = {
            k: {str(c): v for c, v in sorted(vals.items())}
            for k, vals in self.classification_confidence.items()}
        return d

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def csv_row(self):
        d = self.to_dict()
        return ["" if d[k] is None else d[k] for k in self.CSV_FIELDS]


def write_reports_csv(path, reports, extra=None):
    extra = dict(sorted((extra or {}).items()))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(EvaluationReport.CSV_FIELDS) + list(extra))
        for r in reports:
            w.writerow(r.csv_row() + list(extra.values()))


def evaluate(clf, p, source_test: LabeledDataset, nonsource_test: LabeledDataset, target: int,
             interpreter: str = "cam", mask_cfg=None, model_name: str = "model",
             preprocess=None, with_maps: bool = True, thresholds=THRESHOLDS) -> EvaluationReport:
    """Full metric bundle for one perturbation on pre-filtered test samples."""

    if len(source_test) == 0 or len(nonsource_test) == 0:
        raise ParameterError("empty evaluation set")
    source = int(source_test.labels[0])
    probs_s = _perturbed_probs(clf, p, source_test.images, preprocess)
    probs_o = _perturbed_probs(clf, p, nonsource_test.images, preprocess)
    iou_mean, curve = float("nan"), np.full(len(thresholds), np.nan)
    if with_maps:
        adv = apply_perturbation(source_test.images, _values(p))
        benign_maps = attribution(clf, source_test.images, source_test.labels, interpreter, mask_cfg)
        adv_maps = attribution(clf, adv, clf.predict(adv), interpreter, mask_cfg)
        iou_mean, curve = batch_iou(adv_maps, benign_maps, thresholds)
    return EvaluationReport(
        model=model_name, interpreter=interpreter, source=source, target=int(target),
        fooling_ratio=fooling_ratio_from_probs(probs_s, target),
        any_flip_ratio=any_flip_ratio_from_probs(probs_s, source_test.labels),
        misclassification_confidence=misclassification_confidence_from_probs(probs_s, target),
        classification_confidence=classification_confidence(clf, p, nonsource_test, preprocess),
        leakage_rate=leakage_rate_from_probs(probs_o, nonsource_test.labels),
        iou_mean=iou_mean, iou_per_threshold=[float(v) for v in curve],
        n_source=len(source_test), n_nonsource=len(nonsource_test))


# --- qualitative grid -----------------------------------------------------------

def _tile(arr, size):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    if arr.shape[1:] != size:
        raise ShapeError("all tiles must share one spatial size")
    return np.clip(arr, 0, 1)


def emit_qualitative_grid(rows, path, pad: int = 2, label_band: int = 4, meta=None):
    """Write a PNG with one row per sample.

    Each row is ``(benign image, benign map, adversarial image, adversarial map,
    labels)``; ``labels`` is ``(benign label, adversarial label)`` and is drawn as a
    band of bars above the tiles (one bar height per label index, so runs stay
    pixel-deterministic without fonts).
    """
    rows = list(rows)
    if not rows:
        raise ParameterError("qualitative grid needs at least one row")
    size = tuple(np.asarray(rows[0][0]).shape[1:])
    h, w = size
    n_cols = 4
    row_h = h + label_band + pad
    canvas = np.ones((3, pad + len(rows) * row_h, pad + n_cols * (w + pad)))
    for r, row in enumerate(rows):
        tiles = [_tile(t, size) for t in row[:4]]
        labels = row[4] if len(row) > 4 else (0, 0)
        top = pad + r * row_h
        for c, tile in enumerate(tiles):
            left = pad + c * (w + pad)
            canvas[:, top + label_band:top + label_band + h, left:left + w] = tile
        for c, lab in ((0, labels[0]), (2, labels[1])):
            left = pad + c * (w + pad)
            width = min(w, 2 * (int(lab) + 1))
            canvas[:, top:top + label_band - 1, left:left + width] = 0.0
    save_png(path, canvas, meta)
    return canvas.shape
