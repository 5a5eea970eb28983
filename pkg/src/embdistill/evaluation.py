"""Downstream evaluation of frozen embeddings.

Metric values in reports are on a 0-100 scale (accuracy in %, mAP x 100) so
that single-label and multi-label tasks can share one macro average.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, UsageError
from .losses import log_softmax, softmax
from .nn import AdamState, adam_step

logger = logging.getLogger(__name__)


@dataclass
class LabeledSplit:
    """Embeddings with either integer classes (1-D) or a multi-hot matrix (2-D)."""

    embeddings: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: Optional[int] = None
    ids: Optional[list[str]] = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2:
            raise DataError(f"embeddings must be 2-D, got {self.embeddings.shape}")
        if len(self.labels) != len(self.embeddings):
            raise DataError(f"{len(self.labels)} labels for {len(self.embeddings)} embeddings")
        if self.split not in ("train", "test"):
            raise UsageError(f"split must be train or test, got {self.split!r}")
        if self.multilabel:
            if not np.isin(self.labels, (0, 1)).all():
                raise DataError("multi-hot labels must be 0 or 1")
            self.n_classes = self.labels.shape[1]
        else:
            if len(self.labels) and self.labels.min() < 0:
                raise DataError("class labels must be non-negative")
            top = int(self.labels.max()) + 1 if len(self.labels) else 0
            if self.n_classes is None:
                self.n_classes = top
            elif top > self.n_classes:
                raise DataError(f"label {top - 1} outside [0, {self.n_classes})")

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2


@dataclass
class ProbeConfig:
    lr: float = 1e-2
    max_epochs: int = 500
    plateau: float = 1e-6
    l2: float = 1e-4
    standardize: bool = True
    kind: str = "linear"  # or "knn"
    knn_k: int = 5


def _n_classes(train: LabeledSplit, test: LabeledSplit) -> int:
    if train.multilabel != test.multilabel:
        raise DataError("train and test disagree on single- vs multi-label")
    c = max(train.n_classes, test.n_classes)
    if train.multilabel:
        if train.labels.shape[1] != test.labels.shape[1]:
            raise DataError("train and test have different multi-hot widths")
        return c
    missing = sorted(set(range(c)) - set(np.unique(train.labels).tolist()))
    if missing:
        raise DataError(f"classes {missing} have no training examples")
    return c


def linear_probe(train: LabeledSplit, test: LabeledSplit, config: ProbeConfig | None = None) -> np.ndarray:
    """Logistic-regression probe trained full-batch with Adam.

    Multinomial softmax for single-label data, independent sigmoids for
    multi-label. Weights start at zero (the objective is convex), so the
    result is deterministic. Returns class scores for the test rows.
    """
    cfg = config or ProbeConfig()
    if train.embeddings.shape[1] != test.embeddings.shape[1]:
        raise DataError(
            f"train dim {train.embeddings.shape[1]} != test dim {test.embeddings.shape[1]}"
        )
    c = _n_classes(train, test)
    Xtr, Xte = train.embeddings, test.embeddings
    if cfg.standardize:
        mu = Xtr.mean(axis=0)
        sd = Xtr.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd
    n, d = Xtr.shape
    if train.multilabel:
        Y = train.labels.astype(np.float64)
    else:
        Y = np.zeros((n, c))
        Y[np.arange(n), train.labels] = 1.0

    params = {"W": np.zeros((d, c)), "b": np.zeros(c)}
    state = AdamState.zeros_like(params)
    prev = np.inf
    for epoch in range(cfg.max_epochs):
        logits = Xtr @ params["W"] + params["b"]
        if train.multilabel:
            # numerically stable BCE with logits
            loss = np.mean(np.sum(np.logaddexp(0.0, logits) - Y * logits, axis=1))
            dlogits = (1.0 / (1.0 + np.exp(-logits)) - Y) / n
        else:
            loss = -np.mean(np.sum(Y * log_softmax(logits), axis=1))
            dlogits = (softmax(logits) - Y) / n
        loss += 0.5 * cfg.l2 * float(np.sum(params["W"] ** 2))
        if abs(prev - loss) < cfg.plateau:
            logger.debug("probe converged after %d epochs (loss %.6g)", epoch, loss)
            break
        prev = loss
        grads = {"W": Xtr.T @ dlogits + cfg.l2 * params["W"], "b": dlogits.sum(axis=0)}
        adam_step(params, grads, state, cfg.lr)
    logits = Xte @ params["W"] + params["b"]
    if train.multilabel:
        return 1.0 / (1.0 + np.exp(-logits))
    return softmax(logits)


def knn_classify(train: LabeledSplit, test: LabeledSplit, k: int = 5) -> np.ndarray:
    """Cosine-similarity kNN. Scores are the neighbours' vote fractions per class.

    Equal similarities resolve toward the lower training index.
    """
    m = len(train.embeddings)
    if not 1 <= k <= m:
        raise UsageError(f"k must be in [1, {m}], got {k}")
    c = _n_classes(train, test)

    def unit(X):
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        return X / np.where(norms > 0, norms, 1.0)

    sim = unit(test.embeddings) @ unit(train.embeddings).T
    nbrs = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    if train.multilabel:
        return train.labels[nbrs].astype(np.float64).mean(axis=1)
    onehot = np.zeros((m, c))
    onehot[np.arange(m), train.labels] = 1.0
    return onehot[nbrs].mean(axis=1)


def accuracy(scores, labels) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise UsageError(f"scores {scores.shape} and labels {labels.shape} do not match")
    return 100.0 * float(np.mean(np.argmax(scores, axis=1) == labels))


def average_precision(scores, positives) -> float:
    """Non-interpolated AP of one ranked list; equal scores keep original order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    n_pos = int(hits.sum())
    if n_pos == 0:
        raise DataError("no positives")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def mean_average_precision(scores, labels) -> float:
    """Mean over classes of non-interpolated AP. Classes without positives are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise UsageError(f"scores {scores.shape} and labels {labels.shape} do not match")
    aps, skipped = [], []
    for j in range(labels.shape[1]):
        if labels[:, j].any():
            aps.append(average_precision(scores[:, j], labels[:, j]))
        else:
            skipped.append(j)
    if skipped:
        logger.warning("mAP skipped %d classes without positives: %s", len(skipped), skipped)
    if not aps:
        raise DataError("no class has a positive example")
    return float(np.mean(aps))


@dataclass
class ProbeTask:
    name: str
    train: LabeledSplit
    test: LabeledSplit


@dataclass
class EvalReport:
    metrics: dict[str, float] = field(default_factory=dict)  # 0-100 scale
    metric_names: dict[str, str] = field(default_factory=dict)
    retention: Optional[float] = None

    @property
    def macro_average(self) -> float:
        if not self.metrics:
            raise DataError("empty report")
        return float(np.mean(list(self.metrics.values())))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "metric", "value"])
            for name, value in self.metrics.items():
                w.writerow([name, self.metric_names.get(name, ""), repr(value)])
            w.writerow(["macro_avg", "", repr(self.macro_average)])
            if self.retention is not None:
                w.writerow(["retention", "%", repr(self.retention)])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        report = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["task", "metric", "value"]:
                raise DataError(f"{path}: not an evaluation report (header {header})")
            for row in reader:
                if len(row) != 3:
                    raise DataError(f"{path}: malformed row {row}")
                if row[0] in ("macro_avg", "retention"):
                    continue
                report.metrics[row[0]] = float(row[2])
                report.metric_names[row[0]] = row[1]
        return report

    def table(self) -> str:
        width = max([len(n) for n in self.metrics] + [9])
        lines = [f"{'task':<{width}}  {'metric':<6}  {'value':>7}"]
        for name, value in self.metrics.items():
            lines.append(f"{name:<{width}}  {self.metric_names.get(name, ''):<6}  {value:7.2f}")
        lines.append(f"{'macro_avg':<{width}}  {'':<6}  {self.macro_average:7.2f}")
        if self.retention is not None:
            lines.append(f"{'retention':<{width}}  {'%':<6}  {self.retention:7.1f}")
        return "\n".join(lines)


def retention(student, teacher) -> float:
    """Student macro average as a percentage of the teacher's.

    Accepts :class:`EvalReport` objects or plain macro-average numbers.
    """
    if isinstance(student, EvalReport) and isinstance(teacher, EvalReport):
        if list(student.metrics) != list(teacher.metrics):
            raise DataError(
                f"task sets differ: {list(student.metrics)} vs {list(teacher.metrics)}"
            )
    s = student.macro_average if isinstance(student, EvalReport) else float(student)
    t = teacher.macro_average if isinstance(teacher, EvalReport) else float(teacher)
    if t <= 0:
        raise DataError(f"teacher average must be positive, got {t}")
    return 100.0 * s / t


def score_task(task: ProbeTask, train_emb, test_emb, config: ProbeConfig | None = None) -> tuple[str, float]:
    cfg = config or ProbeConfig()
    train = LabeledSplit(train_emb, task.train.labels, "train", task.train.n_classes)
    test = LabeledSplit(test_emb, task.test.labels, "test", task.test.n_classes)
    if cfg.kind == "linear":
        scores = linear_probe(train, test, cfg)
    elif cfg.kind == "knn":
        scores = knn_classify(train, test, cfg.knn_k)
    else:
        raise UsageError(f"unknown probe kind {cfg.kind!r}")
    if test.multilabel:
        return "mAP", 100.0 * mean_average_precision(scores, test.labels)
    return "acc", accuracy(scores, test.labels)


def evaluate_tasks(
    tasks: list[ProbeTask],
    student=None,
    probe_config: ProbeConfig | None = None,
    teacher_report: EvalReport | None = None,
) -> EvalReport:
    """Probe every task, optionally after passing inputs through ``student``.

    ``student`` is any callable mapping an input matrix to embeddings; when
    omitted, the split embeddings are probed as they are.
    """
    report = EvalReport()
    for task in tasks:
        tr, te = task.train.embeddings, task.test.embeddings
        if student is not None:
            tr, te = student(tr), student(te)
        name, value = score_task(task, tr, te, probe_config)
        report.metrics[task.name] = value
        report.metric_names[task.name] = name
    if teacher_report is not None:
        report.retention = retention(report, teacher_report)
    return report
