"""Classification metrics over the three direction classes.

Macro averages are unweighted means of per-class values; any precision,
recall, or F1 whose denominator vanishes is defined as 0 and flagged in
the report so degenerate prediction patterns stay visible.
"""

from dataclasses import dataclass, field

import numpy as np

from . import configio
from .errors import DataError
from .model import load_checkpoint
from .tensor import Tensor, no_grad

N_CLASSES = 3


@dataclass
class MetricsReport:
    precision: np.ndarray  # [3]
    recall: np.ndarray  # [3]
    f1: np.ndarray  # [3]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray  # [3, 3] rows true, columns predicted
    horizon: int | None = None
    degenerate: bool = False
    metadata: dict = field(default_factory=dict)

    def to_pairs(self):
        pairs = {}
        for i in range(N_CLASSES):
            pairs[f"class{i}.precision"] = configio.fmt_float(self.precision[i])
            pairs[f"class{i}.recall"] = configio.fmt_float(self.recall[i])
            pairs[f"class{i}.f1"] = configio.fmt_float(self.f1[i])
            for j in range(N_CLASSES):
                pairs[f"confusion.{i}.{j}"] = str(int(self.confusion[i, j]))
        pairs["macro.precision"] = configio.fmt_float(self.macro_precision)
        pairs["macro.recall"] = configio.fmt_float(self.macro_recall)
        pairs["macro.f1"] = configio.fmt_float(self.macro_f1)
        pairs["degenerate"] = str(self.degenerate).lower()
        if self.horizon is not None:
            pairs["horizon"] = str(self.horizon)
        for k, v in self.metadata.items():
            pairs[f"meta.{k}"] = str(v)
        return pairs

    def to_text(self):
        """Canonical key-sorted form, stable for diffing."""
        return configio.canonical_text(self.to_pairs())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def confusion_matrix(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DataError(
            f"predictions shape {predictions.shape} != labels shape {labels.shape}"
        )
    if len(labels) == 0:
        raise DataError("cannot evaluate an empty prediction set")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def compute_metrics(predictions, labels, horizon=None, metadata=None):
    """Per-class and macro precision/recall/F1 plus the confusion matrix."""
    cm = confusion_matrix(predictions, labels)
    tp = np.diag(cm).astype(np.float64)
    pred_totals = cm.sum(axis=0).astype(np.float64)
    true_totals = cm.sum(axis=1).astype(np.float64)
    degenerate = False
    precision = np.zeros(N_CLASSES)
    recall = np.zeros(N_CLASSES)
    f1 = np.zeros(N_CLASSES)
    for c in range(N_CLASSES):
        if pred_totals[c] > 0:
            precision[c] = tp[c] / pred_totals[c]
        else:
            degenerate = True
        if true_totals[c] > 0:
            recall[c] = tp[c] / true_totals[c]
        else:
            degenerate = True
        if precision[c] + recall[c] > 0:
            f1[c] = 2 * precision[c] * recall[c] / (precision[c] + recall[c])
        else:
            degenerate = True
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=cm,
        horizon=horizon,
        degenerate=degenerate,
        metadata=dict(metadata or {}),
    )


def predict(model, windows, batch_size=256):
    """Eval-mode argmax predictions over [n, 40, 40] windows."""
    n = len(windows)
    if n == 0:
        raise DataError("cannot evaluate an empty window set")
    preds = np.empty(n, dtype=np.int64)
    with no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            x = Tensor(windows[lo:hi][:, None, :, :], dtype=model.dtype)
            logits = model.forward(x, train=False)
            preds[lo:hi] = np.argmax(logits.data, axis=1)
    return preds


def evaluate_model(model, window_set, metadata=None):
    preds = predict(model, window_set.windows)
    return compute_metrics(
        preds, window_set.labels, horizon=window_set.horizon, metadata=metadata
    )


def evaluate_checkpoint(checkpoint_path, window_set, config=None):
    """Load a checkpoint and score it on a window set."""
    model, meta = load_checkpoint(checkpoint_path, config=config)
    metadata = {"checkpoint": checkpoint_path}
    if "run.config_hash" in meta:
        metadata["config_hash"] = meta["run.config_hash"]
    return evaluate_model(model, window_set, metadata=metadata)
