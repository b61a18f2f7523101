"""Single-class universal adversarial perturbations against interpretable classifiers."""

from .attack import (AttackConfig, AttackTrace, SingleClassUniversalPerturbation,
                     generate_universal_perturbation)
from .blackbox import TeacherOracle, label_with_teacher, train_student, transfer_evaluate
from .core import (LabeledDataset, ParameterError, Perturbation, RandomSource, ShapeError,
                   apply_perturbation, load_perturbation, save_perturbation)
from .data import make_shapes
from .defenses import (AdvTrainConfig, BitDepthReduction, DefenseChain, MedianSmoothing,
                       RandomResizePad, adversarial_train, apply_chain)
from .interpreters import (CAMInterpreter, GradInterpreter, MaskConfig, MaskInterpreter,
                           make_interpreter)
from .metrics import EvaluationReport, evaluate, iou
from .models import CNNClassifier, TrainConfig, load_checkpoint, save_checkpoint, train_classifier

__version__ = "0.1.0"

__all__ = [
    "AdvTrainConfig", "AttackConfig", "AttackTrace", "BitDepthReduction", "CAMInterpreter",
    "CNNClassifier", "DefenseChain", "EvaluationReport", "GradInterpreter", "LabeledDataset",
    "MaskConfig", "MaskInterpreter", "MedianSmoothing", "ParameterError", "Perturbation",
    "RandomResizePad", "RandomSource", "ShapeError", "SingleClassUniversalPerturbation",
    "TeacherOracle", "TrainConfig", "adversarial_train", "apply_chain", "apply_perturbation",
    "evaluate", "generate_universal_perturbation", "iou", "label_with_teacher",
    "load_checkpoint", "load_perturbation", "make_interpreter", "make_shapes",
    "save_checkpoint", "save_perturbation", "train_classifier", "train_student",
    "transfer_evaluate",
]
