"""Teacher-student transfer: predict-only oracle, teacher labeling, student training."""

from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .core import LabeledDataset, ParameterError, apply_perturbation
from .models import TrainConfig, train_classifier


class OracleError(RuntimeError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass
class QueryRecord:
    index: int
    label: int
    confidence: float
    timestamp: float
    call: str = "predict"


class TeacherOracle:
    """Predict-only view of a classifier.

    Only labels and top-1 confidences leave the oracle; gradients, activations and
    weights are unreachable through its surface. Every answered image is logged.
    """

    __slots__ = ("_predict_proba", "_arch", "_lock", "_log", "_clock")

    def __init__(self, classifier, clock=time.time):
        self._predict_proba = classifier.predict_proba
        self._arch = getattr(classifier, "arch", None)
        self._lock = threading.Lock()
        self._log: list[QueryRecord] = []
        self._clock = clock

    @property
    def architecture(self):
        return self._arch

    @property
    def query_count(self) -> int:
        return len(self._log)

    @property
    def log(self) -> tuple:
        return tuple(self._log)

    def query(self, images, with_confidence=False):
        images = np.asarray(images, dtype=np.float32)
        single = images.ndim == 3
        batch = images[None] if single else images
        probs = self._predict_proba(batch)
        labels = probs.argmax(axis=1)
        conf = probs[np.arange(len(probs)), labels]
        now = self._clock()
        with self._lock:
            start = len(self._log)
            self._log.extend(QueryRecord(start + k, int(l), float(c), now)
                             for k, (l, c) in enumerate(zip(labels, conf)))
        if single:
            labels, conf = labels[0], conf[0]
        return (labels, conf) if with_confidence else labels

    def predict(self, images):
        return self.query(images)

    def write_log(self, path, include_timestamp=True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "call", "label", "confidence", "timestamp"])
            for r in self._log:
                w.writerow([r.index, r.call, r.label, f"{r.confidence:.8f}",
                            f"{r.timestamp:.6f}" if include_timestamp else ""])


def label_with_teacher(teacher: TeacherOracle, pool, chunk: int = 256,
                       names=None, split="train") -> LabeledDataset:
    """Label an unlabeled pool with the teacher's argmax, in input order."""
    pool = np.asarray(pool, dtype=np.float32)
    if len(pool) == 0:
        raise ParameterError("empty pool")
    labels = []
    for start in range(0, len(pool), chunk):
        try:
            labels.append(teacher.query(pool[start:start + chunk]))
        except Exception as exc:  # surfaced with the first index of the failing chunk
            raise OracleError(f"teacher query failed at index {start}: {exc}", start) from exc
    labels = np.concatenate(labels).astype(np.int64)
    k = max(int(labels.max()) + 1, len(names) if names else 0)
    return LabeledDataset(pool, labels, k, split, names)


def agreement(student, teacher: TeacherOracle, images) -> float:
    return float(np.mean(student.predict(images) == teacher.query(images)))


def train_student(labeled: LabeledDataset, cfg: TrainConfig, arch: str = "cnn-large",
                  teacher_arch=None, allow_same_arch=False, heldout=None, teacher=None):
    """White-box surrogate trained on teacher labels.

    ``heldout`` is an unlabeled pool; when given together with ``teacher`` the
    held-out agreement is stored on ``agreement_``.
    """
    if teacher is not None and teacher_arch is None:
        teacher_arch = teacher.architecture
    if not allow_same_arch and teacher_arch is not None and arch == teacher_arch:
        raise ParameterError(f"student architecture {arch!r} equals the teacher's")
    student = train_classifier(labeled, cfg, arch=arch)
    student.agreement_ = None
    if heldout is not None and teacher is not None:
        student.agreement_ = agreement(student, teacher, heldout)
    return student


def transfer_evaluate(teacher: TeacherOracle, p, source: LabeledDataset, target: int) -> float:
    """Fooling ratio of ``p`` measured through the oracle only."""
    if len(source) == 0:
        raise ParameterError("empty sample set")
    adv = apply_perturbation(source.images, getattr(p, "values", p))
    return float(np.mean(teacher.query(adv) == target))
