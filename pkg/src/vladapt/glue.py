"""GLUE-style classification tasks: metrics, TSV loading and the fine-tune/evaluate pipeline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, InputError, ParseError, VLAdaptError

log = logging.getLogger(__name__)

ACCURACY, F1, MATTHEWS, SPEARMAN = "accuracy", "f1", "matthews", "spearman"
METRICS = (ACCURACY, F1, MATTHEWS, SPEARMAN)
BINARY_KIND, MULTICLASS_KIND, REGRESSION_KIND = "binary", "multiclass", "regression"

EXCLUDED_FROM_MACRO = {"wnli"}

# Per-task metric conventions of the benchmark.  Tasks reporting two numbers
# (accuracy/F1) average the F1.
TASK_METRICS = {
    "cola": (MATTHEWS, ()),
    "mrpc": (F1, (ACCURACY,)),
    "qqp": (F1, (ACCURACY,)),
    "sts-b": (SPEARMAN, ()),
    "stsb": (SPEARMAN, ()),
}

# Published dev-set numbers for the best adaptation per model, kept only as
# display metadata next to desk-scale results.
REFERENCE_SCORES = {
    "note": "published full-scale numbers; not reproducible at this scale",
    "per_task": {
        "BERT-base": {"CoLA": 61.1, "MNLI": 84.6, "MRPC": "87.3/91.2", "QNLI": 91.9, "QQP": "91.1/88.0",
                      "RTE": 70.4, "SST-2": 93.7, "STS-B": 88.2},
        "FLAVA": {"CoLA": 50.1, "MNLI": 81.6, "MRPC": "83.6/88.3", "QNLI": 87.8, "QQP": "90.4/87.2",
                  "RTE": 55.6, "SST-2": 92.4, "STS-B": 87.1},
        "CLIP-BERT": {"CoLA": 55.4, "MNLI": 83.2, "MRPC": "75.5/84.1", "QNLI": 89.8, "QQP": "91.1/88.0",
                      "RTE": 58.1, "SST-2": 92.0, "STS-B": 87.8},
        "LXMERT": {"CoLA": 15.9, "MNLI": 68.1, "MRPC": "69.9/81.6", "QNLI": 68.0, "QQP": "84.1/76.8",
                   "RTE": 58.5, "SST-2": 86.6, "STS-B": 40.1},
        "VisualBERT": {"CoLA": 53.3, "MNLI": 83.7, "MRPC": "80.4/86.4", "QNLI": 90.7, "QQP": "90.9/87.6",
                       "RTE": 67.5, "SST-2": 91.7, "STS-B": 89.6},
    },
    "macro": {
        "BERT-base": {"trained-LXMERT": 80.7, "trained-LXMERT-scratch": 64.1, "trained-Wikipedia": 81.1,
                      "default": 83.7},
        "FLAVA": {"default": 78.8},
        "CLIP-BERT": {"default": 79.6, "no-visual-features-finetuned-LXMERT": 79.0,
                      "no-visual-features-finetuned-Wikipedia": 79.7, "avg-visual-features": 79.8,
                      "zero-image-visual-features": 79.4, "zeroed-visual-features": 79.7,
                      "finetuned-LXMERT-visual-features": 79.5, "finetuned-Wikipedia-visual-features": 79.6,
                      "imagined-visual-features": 79.6},
        "LXMERT": {"default": 61.9, "no-visual-features-finetuned-LXMERT": 59.7,
                   "no-visual-features-finetuned-Wikipedia": 61.9, "avg-visual-features": 61.3,
                   "zero-image-visual-features": 59.9, "zeroed-visual-features": 61.8,
                   "finetuned-LXMERT-visual-features": 61.5, "finetuned-Wikipedia-visual-features": 61.6},
        "VisualBERT": {"default": 80.6, "no-visual-features-finetuned-LXMERT": 80.1,
                       "no-visual-features-finetuned-Wikipedia": 81.3, "avg-visual-features": 80.9,
                       "zero-image-visual-features": 80.6, "zeroed-visual-features": 79.0,
                       "finetuned-LXMERT-visual-features": 79.9, "finetuned-Wikipedia-visual-features": 80.5},
    },
}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check(predictions, golds) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(predictions), np.asarray(golds)
    if p.ndim != 1 or g.ndim != 1:
        raise InputError("predictions and golds must be 1-D sequences")
    if len(p) != len(g):
        raise InputError(f"length mismatch: {len(p)} predictions vs {len(g)} golds")
    if len(p) == 0:
        raise InputError("cannot score empty inputs")
    return p, g


def accuracy(predictions, golds) -> float:
    p, g = _check(predictions, golds)
    return float(np.mean(p == g))


def f1_score(predictions, golds, positive=1) -> float:
    p, g = _check(predictions, golds)
    tp = int(np.sum((p == positive) & (g == positive)))
    fp = int(np.sum((p == positive) & (g != positive)))
    fn = int(np.sum((p != positive) & (g == positive)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def matthews(predictions, golds) -> float:
    """Matthews correlation (multi-class generalization); 0 when undefined."""
    p, g = _check(predictions, golds)
    classes, inv = np.unique(np.concatenate([g, p]), return_inverse=True)
    k = len(classes)
    gi, pi = inv[: len(g)], inv[len(g):]
    conf = np.zeros((k, k), dtype=np.float64)
    np.add.at(conf, (gi, pi), 1.0)
    t, q = conf.sum(axis=1), conf.sum(axis=0)
    c, s = np.trace(conf), conf.sum()
    denom = math.sqrt((s * s - q @ q) * (s * s - t @ t))
    if denom == 0.0:
        return 0.0
    return float((c * s - t @ q) / denom)


def spearman(predictions, golds) -> float:
    """Pearson correlation of average ranks; 0 when either side is constant."""
    p, g = _check(predictions, golds)
    rp = rankdata(p.astype(np.float64), method="average")
    rg = rankdata(g.astype(np.float64), method="average")
    rp -= rp.mean()
    rg -= rg.mean()
    denom = math.sqrt(float(rp @ rp) * float(rg @ rg))
    if denom == 0.0:
        return 0.0
    return float(rp @ rg / denom)


_METRIC_FNS = {ACCURACY: accuracy, F1: f1_score, MATTHEWS: matthews, SPEARMAN: spearman}


def compute_metric(kind: str, predictions, golds) -> float:
    try:
        fn = _METRIC_FNS[kind]
    except KeyError:
        raise ConfigError(f"unknown metric {kind!r}") from None
    return fn(predictions, golds)


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


@dataclass
class GlueExample:
    text_a: str
    text_b: Optional[str]
    label: Union[int, float]


@dataclass
class GlueTask:
    name: str
    head_kind: str
    train: list[GlueExample]
    dev: list[GlueExample]
    num_classes: int = 2
    metric: Optional[str] = None
    extra_metrics: tuple[str, ...] = ()

    def __post_init__(self):
        if self.head_kind not in (BINARY_KIND, MULTICLASS_KIND, REGRESSION_KIND):
            raise ConfigError(f"unknown task kind {self.head_kind!r}")
        default, extra = TASK_METRICS.get(self.name.lower(), (None, ()))
        if self.metric is None:
            self.metric = default or (SPEARMAN if self.head_kind == REGRESSION_KIND else ACCURACY)
            self.extra_metrics = self.extra_metrics or extra
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.head_kind == REGRESSION_KIND:
            self.num_classes = 1
            if self.metric != SPEARMAN or any(m != SPEARMAN for m in self.extra_metrics):
                raise ConfigError("regression tasks are scored with spearman only")
        elif self.metric == SPEARMAN:
            raise ConfigError("spearman is reserved for regression tasks")
        if self.head_kind == BINARY_KIND:
            self.num_classes = 2
        if not self.dev:
            raise InputError(f"task {self.name}: dev set must be nonempty")
        for ex in (*self.train, *self.dev):
            if self.head_kind == REGRESSION_KIND:
                ex.label = float(ex.label)
            else:
                label = int(ex.label)
                if label != ex.label or not 0 <= label < self.num_classes:
                    raise InputError(f"task {self.name}: label {ex.label!r} invalid for {self.num_classes} classes")
                ex.label = label

    @property
    def pair(self) -> bool:
        return any(ex.text_b is not None for ex in self.train + self.dev)


def read_task_tsv(path, regression: bool = False) -> list[GlueExample]:
    """Rows are ``text_a<TAB>label`` or ``text_a<TAB>text_b<TAB>label``."""
    path = Path(path)
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ParseError(path, lineno, f"expected 2 or 3 tab-separated fields, got {len(parts)}")
            try:
                label = float(parts[-1]) if regression else int(parts[-1])
            except ValueError:
                raise ParseError(path, lineno, f"bad label {parts[-1]!r}") from None
            text_b = parts[1] if len(parts) == 3 else None
            examples.append(GlueExample(parts[0], text_b, label))
    return examples


def write_task_tsv(path, examples: Sequence[GlueExample]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            fields = [ex.text_a] if ex.text_b is None else [ex.text_a, ex.text_b]
            if any("\t" in f or "\n" in f for f in fields):
                raise InputError(f"{path}: example text contains a tab or newline")
            fh.write("\t".join([*fields, str(ex.label)]) + "\n")
    return path


def load_task(name: str, train_path, dev_path, head_kind: str = BINARY_KIND, num_classes: int = 2,
              metric: Optional[str] = None) -> GlueTask:
    regression = head_kind == REGRESSION_KIND
    return GlueTask(name, head_kind, read_task_tsv(train_path, regression), read_task_tsv(dev_path, regression),
                    num_classes, metric)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def macro_average(scores: dict[str, float]) -> float:
    """Unweighted mean over tasks, WNLI excluded."""
    kept = [v for name, v in scores.items() if name.lower() not in EXCLUDED_FROM_MACRO]
    if not kept:
        raise InputError("no tasks left for the macro average")
    return float(math.fsum(kept) / len(kept))


class TaskFailure(VLAdaptError):
    def __init__(self, task: str, cause: Exception):
        self.task = task
        self.cause = cause
        super().__init__(f"task {task}: {cause}")


@dataclass
class GlueReport:
    per_task: dict[str, dict] = field(default_factory=dict)
    macro: float = float("nan")
    curves: dict[str, list] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_task": self.per_task, "macro": self.macro}


def run_glue_pipeline(adapted, tasks: Sequence[GlueTask], train) -> GlueReport:
    """Fine-tune a fresh copy of the adapted model per task and score it on dev."""
    from .training import encode_examples, finetune_classification, predict

    if not tasks:
        raise InputError("no tasks given")
    report = GlueReport()
    primary = {}
    for task in tasks:
        try:
            fit = finetune_classification(adapted, task, train)
        except VLAdaptError as exc:
            raise TaskFailure(task.name, exc) from exc
        seqs, visuals = encode_examples(adapted, task.dev)
        preds = predict(fit.model, fit.head, seqs, visuals, adapted.mode)
        golds = [ex.label for ex in task.dev]
        scores = {m: compute_metric(m, preds, golds) for m in (task.metric, *task.extra_metrics)}
        primary[task.name] = scores[task.metric]
        report.per_task[task.name] = {"metric": task.metric, "score": scores[task.metric], "scores": scores,
                                      "best_epoch": fit.best_epoch}
        report.curves[task.name] = fit.curve
        log.info("task %s: %s=%.4f", task.name, task.metric, scores[task.metric])
    report.macro = macro_average(primary)
    return report
