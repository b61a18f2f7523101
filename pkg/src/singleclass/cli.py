"""Config-driven experiment runner: train, attack, evaluate, defend, distill, report."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from .attack import LAMBDA_GRID, AttackConfig, generate_universal_perturbation, select_lambda
from .blackbox import TeacherOracle, label_with_teacher, train_student, transfer_evaluate
from .core import LabeledDataset, ParameterError, load_perturbation, save_perturbation
from .data import CATEGORY_NAMES, load_image_folder, make_shapes
from .defenses import ADV_TRAIN_PRESETS, AdvTrainConfig, DefenseChain, adversarial_train
from .interpreters import INTERPRETERS, MaskConfig, attribution
from .metrics import (THRESHOLDS, eligible, emit_qualitative_grid, evaluate, fooling_ratio,
                      write_reports_csv)
from .models import ARCHITECTURES, TrainConfig, load_checkpoint, save_checkpoint, train_classifier

log = logging.getLogger("singleclass")

SUBCOMMANDS = ("train", "attack", "evaluate", "defend", "distill", "report")

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {"kind": "shapes", "path": None, "n_train": 150, "n_test": 50, "size": 32,
                "num_categories": 10, "jitter": 0.3, "opacity": 0.35},
    "model": {"arch": "cnn-small", "epochs": 10, "batch_size": 32, "lr": 0.1, "lr_final": 0.01,
              "lr_decay": "exponential", "momentum": 0.9, "weight_decay": 5e-4},
    "attack": {"source": 1, "target": 5, "eta": 0.05, "lam": 0.1, "batch_size": 32,
               "gamma": 0.6, "beta1": 0.9, "beta2": 0.999, "max_iter": 5000,
               "check_interval": 50, "val_fraction": 0.2},
    "interpreter": {"name": "cam", "mask": asdict(MaskConfig())},
    "metrics": {"thresholds": list(THRESHOLDS), "min_confidence": 0.6, "grid_rows": 4},
    "defense": {
        "chains": [[["bit_depth", {"bits": 4}], ["median", {"kernel": 3}]],
                   [["median", {"kernel": 3}], ["resize_pad", {"scale_range": [0.8, 1.0]}]],
                   [["resize_pad", {"scale_range": [0.8, 1.0]}], ["bit_depth", {"bits": 4}]]],
        # None means "take the preset's value"
        "adv_train": {"preset": "reduced", **{f.name: None for f in fields(AdvTrainConfig)}},
    },
    "blackbox": {"teacher_arch": "cnn-wide", "student_arch": "cnn-large", "pool_per_class": 150,
                 "teacher_epochs": 10, "student_epochs": 10, "allow_same_arch": False},
}

PRESETS = {
    "smoke": {
        "dataset": {"n_train": 60, "n_test": 12, "num_categories": 4, "size": 24},
        "model": {"epochs": 8},
        "attack": {"source": 0, "target": 1, "max_iter": 20, "check_interval": 10},
        "metrics": {"grid_rows": 2},
        "defense": {"adv_train": {"preset": "reduced", "epochs": 1}},
        "blackbox": {"pool_per_class": 60, "teacher_epochs": 8, "student_epochs": 8},
    },
    "desk": {},
    # label-name placeholders; they resolve against an image-folder dataset with these names
    "panda-cat": {"attack": {"source": "panda", "target": "cat"}},
    "dog-goose": {"attack": {"source": "dog", "target": "goose"}},
    "cup-wolf": {"attack": {"source": "cup", "target": "wolf"}},
    "cifar10-advtrain": {"defense": {"adv_train": {"preset": "cifar10"}}},
}


class ConfigError(ValueError):
    def __init__(self, field, message, line=None):
        where = field if line is None else f"line {line}, {field}"
        super().__init__(f"{where}: {message}")
        self.field = field
        self.line = line


class DependencyError(RuntimeError):
    def __init__(self, artifact, subcommand):
        super().__init__(f"missing {artifact}; run `{subcommand}` first")
        self.subcommand = subcommand


class ArtifactExistsError(RuntimeError):
    pass


# --- config ---------------------------------------------------------------------

def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for k, v in (update or {}).items():
        key = f"{path}.{k}" if path else k
        if k not in out:
            raise ConfigError(key, "unknown field")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(key, "expected a mapping")
            out[k] = _merge(out[k], v, key)
        else:
            out[k] = v
    return out


def _line_index(text):
    """Dotted field path -> 1-based source line, from the YAML node tree."""
    index = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{prefix}.{k.value}" if prefix else str(k.value)
                index[key] = k.start_mark.line + 1
                walk(v, key)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return index
    if root is not None:
        walk(root, "")
    return index


def parse_override(item):
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    out = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def category_names(dataset_cfg):
    if dataset_cfg["kind"] == "shapes":
        return CATEGORY_NAMES[:dataset_cfg["num_categories"]]
    root = Path(dataset_cfg["path"])
    return sorted(p.name for p in root.joinpath("train").iterdir() if p.is_dir())


def _resolve_category(value, names, field):
    if isinstance(value, str):
        if value not in names:
            raise ConfigError(field, f"category {value!r} not among {names}")
        return names.index(value)
    if not isinstance(value, int) or not 0 <= value < len(names):
        raise ConfigError(field, f"category index must be in [0, {len(names)})")
    return value


def _check(field, fn, keys=()):
    """Run a constructor; errors naming one of ``keys`` are pinned to that sub-field."""
    try:
        return fn()
    except (ParameterError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        msg = str(exc)
        head = msg.split(" ", 1)[0]
        if head in keys:
            field = f"{field}.{head}"
        raise ConfigError(field, msg) from exc


def adv_train_config(cfg) -> AdvTrainConfig:
    raw = dict(cfg["defense"]["adv_train"])
    preset = raw.pop("preset", None)
    params = dict(ADV_TRAIN_PRESETS[preset]) if preset else {}
    params.update({k: v for k, v in raw.items() if v is not None})
    params.setdefault("seed", cfg["seed"])
    return AdvTrainConfig(**params)


def validate(cfg, lines=None):
    """Resolve category names and check every range before any work starts."""
    lines = lines or {}

    def fail(field, msg):
        raise ConfigError(field, msg, lines.get(field))

    try:
        ds = cfg["dataset"]
        if ds["kind"] not in ("shapes", "folder"):
            fail("dataset.kind", "must be 'shapes' or 'folder'")
        if ds["kind"] == "folder":
            if not ds["path"] or not Path(ds["path"]).is_dir():
                fail("dataset.path", f"directory {ds['path']!r} does not exist")
            for split in ("train", "test"):
                if not Path(ds["path"], split).is_dir():
                    fail("dataset.path", f"needs a {split}/ subdirectory")
        else:
            if not 2 <= ds["num_categories"] <= len(CATEGORY_NAMES):
                fail("dataset.num_categories", f"must be in [2, {len(CATEGORY_NAMES)}]")
            for k in ("n_train", "n_test", "size"):
                if not isinstance(ds[k], int) or ds[k] < 1:
                    fail(f"dataset.{k}", "must be a positive integer")
        names = category_names(ds)
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
            fail("seed", "must be a nonnegative integer")
        m = cfg["model"]
        if m["arch"] not in ARCHITECTURES:
            fail("model.arch", f"unknown architecture; choose from {sorted(ARCHITECTURES)}")
        _check("model", lambda: model_train_config(cfg), m)
        a = cfg["attack"]
        a["source"] = _resolve_category(a["source"], names, "attack.source")
        a["target"] = _resolve_category(a["target"], names, "attack.target")
        if a["source"] == a["target"]:
            fail("attack.target", "must differ from attack.source")
        if cfg["interpreter"]["name"] not in INTERPRETERS:
            fail("interpreter.name", f"choose from {INTERPRETERS}")
        _check("interpreter.mask", lambda: MaskConfig(**cfg["interpreter"]["mask"]),
               cfg["interpreter"]["mask"])
        _check("attack", lambda: attack_config(cfg), a)
        mt = cfg["metrics"]
        if not mt["thresholds"] or any(not 0 < t < 1 for t in mt["thresholds"]):
            fail("metrics.thresholds", "thresholds must lie in (0, 1)")
        if not 0 <= mt["min_confidence"] <= 1:
            fail("metrics.min_confidence", "must be in [0, 1]")
        for k, chain in enumerate(cfg["defense"]["chains"]):
            _check(f"defense.chains.{k}", lambda: defense_chain(chain, cfg["seed"]).fit())
        preset = cfg["defense"]["adv_train"].get("preset")
        if preset is not None and preset not in ADV_TRAIN_PRESETS:
            fail("defense.adv_train.preset", f"choose from {sorted(ADV_TRAIN_PRESETS)}")
        _check("defense.adv_train", lambda: adv_train_config(cfg), cfg["defense"]["adv_train"])
        bb = cfg["blackbox"]
        for k in ("teacher_arch", "student_arch"):
            if bb[k] not in ARCHITECTURES:
                fail(f"blackbox.{k}", "unknown architecture")
        if bb["teacher_arch"] == bb["student_arch"] and not bb["allow_same_arch"]:
            fail("blackbox.student_arch", "must differ from blackbox.teacher_arch")
    except ConfigError as exc:
        if exc.line is None and exc.field in lines:
            raise ConfigError(exc.field, str(exc).split(": ", 1)[-1], lines[exc.field]) from None
        raise
    return cfg


def load_config(path=None, preset=None, overrides=(), seed=None, out=None):
    text = ""
    user = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("--config", f"{path} does not exist")
        text = p.read_text()
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError("<syntax>", str(exc).splitlines()[0],
                              None if mark is None else mark.line + 1) from None
        if not isinstance(user, dict):
            raise ConfigError("<root>", "config must be a mapping")
    lines = _line_index(text)
    cfg = DEFAULTS
    preset = preset or user.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = _merge(cfg, PRESETS[preset])
    try:
        cfg = _merge(cfg, user)
    except ConfigError as exc:
        raise ConfigError(exc.field, "unknown field", lines.get(exc.field)) from None
    for item in overrides:
        cfg = _merge(cfg, parse_override(item))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output_dir"] = str(out)
    cfg["preset"] = preset
    return validate(cfg, lines)


def config_hash(cfg) -> str:
    """Hash of everything that influences results; the output location is excluded."""
    payload = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def model_train_config(cfg, epochs=None) -> TrainConfig:
    m = cfg["model"]
    return TrainConfig(epochs=m["epochs"] if epochs is None else epochs,
                       batch_size=m["batch_size"], lr=m["lr"], lr_final=m["lr_final"],
                       lr_decay=m["lr_decay"], momentum=m["momentum"],
                       weight_decay=m["weight_decay"], seed=cfg["seed"])


def attack_config(cfg) -> AttackConfig:
    """``attack.lam: auto`` leaves the weight to the grid search in ``_attack``."""
    a = dict(cfg["attack"])
    a.pop("source")
    if a["lam"] == "auto":
        a["lam"] = LAMBDA_GRID[0]
    return AttackConfig(interpreter=cfg["interpreter"]["name"], seed=cfg["seed"],
                        mask=MaskConfig(**cfg["interpreter"]["mask"]), **a)


def defense_chain(items, seed) -> DefenseChain:
    steps = []
    for item in items:
        name, params = (item[0], item[1] if len(item) > 1 else {})
        params = dict(params or {})
        if "scale_range" in params:
            params["scale_range"] = tuple(params["scale_range"])
        steps.append((name, params))
    return DefenseChain(steps=tuple(steps), seed=seed)


# --- run context ----------------------------------------------------------------

class Run:
    """Shared plumbing for one subcommand invocation."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.hash = config_hash(cfg)
        self._data = None

    @property
    def seed(self):
        return self.cfg["seed"]

    def data(self):
        if self._data is None:
            ds = self.cfg["dataset"]
            if ds["kind"] == "shapes":
                kw = dict(size=ds["size"], num_categories=ds["num_categories"],
                          jitter=ds["jitter"], opacity=ds["opacity"])
                train = make_shapes(ds["n_train"], self.seed, "train", **kw)
                test = make_shapes(ds["n_test"], self.seed, "test", **kw)
            else:
                train = load_image_folder(Path(ds["path"], "train"), "train")
                test = load_image_folder(Path(ds["path"], "test"), "test")
            self._data = (train, test)
        return self._data

    def dataset_hash(self):
        train, test = self.data()
        return hashlib.sha256((train.fingerprint() + test.fingerprint()).encode()).hexdigest()[:16]

    def provenance(self):
        return {"config_hash": self.hash, "seed": self.seed, "dataset_hash": self.dataset_hash()}

    def path(self, name):
        return self.out / name

    def fresh(self, *names):
        """Paths for new artifacts; refuses to overwrite earlier output."""
        self.out.mkdir(parents=True, exist_ok=True)
        paths = [self.path(n) for n in names]
        for p in paths:
            for q in (p, Path(str(p) + ".json")):
                if q.exists():
                    raise ArtifactExistsError(f"{q} already exists; choose a fresh --out")
        return paths

    def require(self, name, subcommand):
        p = self.path(name)
        if not p.exists():
            raise DependencyError(p, subcommand)
        return p

    def write_json(self, path, payload):
        body = dict(payload)
        body.update(self.provenance())
        Path(path).write_text(json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def model(self):
        return load_checkpoint(self.require("model.ckpt", "train"))

    def perturbation(self):
        return load_perturbation(self.require("perturbation.sadv", "attack"))

    def eligible_split(self, clf, data, source):
        gate = self.cfg["metrics"]["min_confidence"]
        e = eligible(clf, data, gate)
        return e.of_category(source), e.excluding(source)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v).__name__)


# --- subcommands ----------------------------------------------------------------

def cmd_train(run: Run):
    (ckpt,) = run.fresh("model.ckpt")
    train, test = run.data()
    clf = train_classifier(train, model_train_config(run.cfg), arch=run.cfg["model"]["arch"],
                           heldout=test)
    save_checkpoint(ckpt, clf, extra=run.provenance())
    log.info("held-out accuracy %.3f", clf.heldout_accuracy_)
    return {"heldout_accuracy": clf.heldout_accuracy_}


def _attack(run: Run, clf, data: LabeledDataset, seed_offset=0):
    a = run.cfg["attack"]
    source, nonsource = run.eligible_split(clf, data, a["source"])
    if len(source) == 0:
        raise ParameterError("no eligible source samples; the classifier is too weak")
    cfg = attack_config(run.cfg)
    cfg.seed += seed_offset
    if a["lam"] == "auto":
        p, trace, _ = select_lambda(clf, source, nonsource, cfg)
        return p, trace
    return generate_universal_perturbation(clf, source, nonsource, cfg)


def cmd_attack(run: Run):
    clf = run.model()
    sadv, trace_csv = run.fresh("perturbation.sadv", "trace.csv")
    train, _ = run.data()
    p, trace = _attack(run, clf, train)
    save_perturbation(sadv, p, extra=run.provenance())
    trace.write_csv(trace_csv, extra=run.provenance())
    return {"converged": trace.converged, "iterations": len(trace)}


def _grid_rows(run: Run, clf, p, source, k):
    interp = run.cfg["interpreter"]["name"]
    mask_cfg = MaskConfig(**run.cfg["interpreter"]["mask"])
    x = source.images[:k]
    adv = np.clip(x - p.values, 0, 1)
    y_adv = clf.predict(adv)
    benign_maps = attribution(clf, x, source.labels[:k], interp, mask_cfg)
    adv_maps = attribution(clf, adv, y_adv, interp, mask_cfg)
    return [(x[i], benign_maps[i], adv[i], adv_maps[i], (source.labels[i], y_adv[i]))
            for i in range(len(x))]


def cmd_evaluate(run: Run):
    clf = run.model()
    p = run.perturbation()
    rep_json, rep_csv, grid = run.fresh("evaluation.json", "evaluation.csv", "grid.png")
    _, test = run.data()
    a = run.cfg["attack"]
    source, nonsource = run.eligible_split(clf, test, a["source"])
    if len(source) == 0 or len(nonsource) == 0:
        raise ParameterError("no eligible test samples to evaluate")
    report = evaluate(clf, p, source, nonsource, a["target"], run.cfg["interpreter"]["name"],
                      MaskConfig(**run.cfg["interpreter"]["mask"]), model_name=clf.arch,
                      thresholds=tuple(run.cfg["metrics"]["thresholds"]))
    report.extra["heldout_accuracy"] = getattr(clf, "heldout_accuracy_", None)
    report.extra["converged"] = p.meta.get("converged")
    run.write_json(rep_json, {"kind": "evaluation", **report.to_dict()})
    write_reports_csv(rep_csv, [report], extra=run.provenance())
    rows = _grid_rows(run, clf, p, source, run.cfg["metrics"]["grid_rows"])
    emit_qualitative_grid(rows, grid, meta=run.provenance())
    return report.to_dict()


def cmd_defend(run: Run):
    clf = run.model()
    p = run.perturbation()
    hardened_ckpt, rep_json, rep_csv = run.fresh("hardened.ckpt", "defense.json", "defense.csv")
    train, test = run.data()
    a = run.cfg["attack"]
    source, _ = run.eligible_split(clf, test, a["source"])
    if len(source) == 0:
        raise ParameterError("no eligible test samples to evaluate")
    rows = []
    before = fooling_ratio(clf, p, source, a["target"])
    for items in run.cfg["defense"]["chains"]:
        chain = defense_chain(items, run.seed)
        after = fooling_ratio(clf, p, source, a["target"], preprocess=chain.transform)
        rows.append({"defense": chain.name, "fooling_before": before, "fooling_after": after,
                     "clean_accuracy_before": clf.heldout_accuracy_,
                     "clean_accuracy_after": float(clf.score(chain.transform(test.images),
                                                             test.labels))})
    at_cfg = adv_train_config(run.cfg)
    maps = attribution(clf, train.images, train.labels, "cam")
    hardened, _ = adversarial_train(clf, train, maps, at_cfg)
    hardened.heldout_accuracy_ = float(hardened.score(test.images, test.labels))
    h_source, _ = run.eligible_split(hardened, test, a["source"])
    # the stored perturbation replayed, and a fresh attack with the same settings
    p_h, trace_h = _attack(run, hardened, train)
    replay = fooling_ratio(hardened, p, h_source, a["target"]) if len(h_source) else 0.0
    adaptive = fooling_ratio(hardened, p_h, h_source, a["target"]) if len(h_source) else 0.0
    rows.append({"defense": "adversarial_training", "fooling_before": before,
                 "fooling_after": replay, "clean_accuracy_before": clf.heldout_accuracy_,
                 "clean_accuracy_after": hardened.heldout_accuracy_,
                 "fooling_after_adaptive": adaptive})
    save_checkpoint(hardened_ckpt, hardened,
                    extra={**run.provenance(), "hardened_by": {"method": "adversarial_training",
                                                              **asdict(at_cfg)}})
    run.write_json(rep_json, {"kind": "defense", "rows": rows,
                              "adv_train": asdict(at_cfg), "attack_converged": trace_h.converged})
    _write_rows(rep_csv, rows, run.provenance())
    return {"rows": rows}


def _write_rows(path, rows, extra):
    keys = list(dict.fromkeys(k for r in rows for k in r)) + sorted(extra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            merged = {**r, **extra}
            vals = [merged.get(k, "") for k in keys]
            w.writerow([repr(v) if isinstance(v, float) else v for v in vals])


def cmd_distill(run: Run):
    names = ("teacher.ckpt", "student.ckpt", "student_perturbation.sadv", "query_log.csv",
             "transfer.json", "transfer.csv")
    teacher_ckpt, student_ckpt, sadv, qlog, rep_json, rep_csv = run.fresh(*names)
    bb = run.cfg["blackbox"]
    train, test = run.data()
    teacher_clf = train_classifier(train, model_train_config(run.cfg, bb["teacher_epochs"]),
                                   arch=bb["teacher_arch"], heldout=test)
    save_checkpoint(teacher_ckpt, teacher_clf, extra=run.provenance())
    oracle = TeacherOracle(teacher_clf)
    ds = run.cfg["dataset"]
    if ds["kind"] == "shapes":
        pool = make_shapes(bb["pool_per_class"], run.seed + 1, "train", size=ds["size"],
                           num_categories=ds["num_categories"], jitter=ds["jitter"],
                           opacity=ds["opacity"]).images
    else:
        pool = train.images
    labeled = label_with_teacher(oracle, pool, names=train.names)
    student = train_student(labeled, model_train_config(run.cfg, bb["student_epochs"]),
                            arch=bb["student_arch"], teacher_arch=bb["teacher_arch"],
                            allow_same_arch=bb["allow_same_arch"], heldout=test.images,
                            teacher=oracle)
    save_checkpoint(student_ckpt, student, extra={**run.provenance(),
                                                  "agreement": student.agreement_})
    a = run.cfg["attack"]
    student_view = LabeledDataset(labeled.images, labeled.labels, train.num_categories,
                                  "train", train.names)
    p, trace = _attack(run, student, student_view)
    save_perturbation(sadv, p, extra=run.provenance())
    # sources the teacher gets right, established through the oracle only
    test_src = test.of_category(a["source"])
    ok = oracle.query(test_src.images) == a["source"]
    src_teacher = test_src.subset(np.flatnonzero(ok))
    s_source, _ = run.eligible_split(student, test, a["source"])
    white = fooling_ratio(student, p, s_source, a["target"]) if len(s_source) else 0.0
    transfer = transfer_evaluate(oracle, p, src_teacher, a["target"]) if len(src_teacher) else 0.0
    oracle.write_log(qlog)
    row = {"teacher_arch": bb["teacher_arch"], "student_arch": bb["student_arch"],
           "agreement": student.agreement_, "student_fooling": white,
           "transfer_fooling": transfer, "queries": oracle.query_count,
           "attack_converged": trace.converged}
    run.write_json(rep_json, {"kind": "transfer", **row})
    _write_rows(rep_csv, [row], run.provenance())
    return row


def cmd_report(run: Run, inputs=()):
    dirs = [run.out] + [Path(d) for d in inputs]
    found = []
    for d in dirs:
        for name in ("evaluation.json", "defense.json", "transfer.json"):
            p = d / name
            if p.exists():
                found.append((d, json.loads(p.read_text())))
    if not found:
        raise DependencyError(run.out / "evaluation.json", "evaluate")
    hashes = {body["dataset_hash"] for _, body in found}
    if len(hashes) > 1:
        raise ParameterError(f"refusing to aggregate artifacts with different dataset hashes: "
                             f"{sorted(hashes)}")
    summary_json, summary_csv, plot = run.fresh("summary.json", "summary.csv", "iou_curve.png")
    rows = []
    for d, body in found:
        kind = body["kind"]
        if kind == "evaluation":
            rows.append({"run": d.name, "kind": kind, "name": body["interpreter"],
                         "fooling": body["fooling_ratio"], "leakage": body["leakage_rate"],
                         "iou": body["iou_mean"]})
        elif kind == "defense":
            rows += [{"run": d.name, "kind": kind, "name": r["defense"],
                      "fooling": r["fooling_after"], "leakage": None, "iou": None}
                     for r in body["rows"]]
        else:
            rows.append({"run": d.name, "kind": kind, "name": body["student_arch"],
                         "fooling": body["transfer_fooling"], "leakage": None, "iou": None})
    run.write_json(summary_json, {"kind": "summary", "rows": rows})
    _write_rows(summary_csv, rows, run.provenance())
    curves = [(d.name, body["iou_per_threshold"]) for d, body in found
              if body["kind"] == "evaluation"]
    _plot_iou(plot, curves, run.cfg["metrics"]["thresholds"], run.provenance())
    return {"rows": rows}


def _plot_iou(path, curves, thresholds, meta):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    for name, curve in curves:
        ax.plot(thresholds, curve, marker="o", label=name)
    ax.set_xlabel("binarization threshold")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    if curves:
        ax.legend(loc="lower left", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None, **{k: str(v) for k, v in
                                                                    meta.items()}})
    plt.close(fig)


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "evaluate": cmd_evaluate,
            "defend": cmd_defend, "distill": cmd_distill, "report": cmd_report}


def build_parser():
    ap = argparse.ArgumentParser(prog="singleclass",
                                 description="Single-class universal perturbation experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="override the global seed")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, repeatable")
        if name == "report":
            sp.add_argument("--inputs", nargs="*", default=[],
                            help="extra run directories to aggregate")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.preset, args.override, args.seed, args.out)
        run = Run(cfg)
        extra = (args.inputs,) if args.command == "report" else ()
        result = COMMANDS[args.command](run, *extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except ArtifactExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "output_dir": str(run.out),
                      "config_hash": run.hash, "result": result},
                     sort_keys=True, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
