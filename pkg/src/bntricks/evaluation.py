"""Accuracy matrices, ACC/BWT, linear-head and nearest-class-mean inference, probes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError
from .model import MlpModel
from .normalization import ema_refresh_pass
from .replay import ReplayBuffer, l2_normalize

LINEAR = "linear"
NCM = "ncm"


@dataclass(frozen=True)
class ClassMeans:
    labels: np.ndarray
    means: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def compute_class_means(model: MlpModel, buffer: ReplayBuffer) -> ClassMeans:
    """Mean of L2-normalized penultimate features of each class's exemplars."""
    if not len(buffer):
        return ClassMeans(np.zeros(0, dtype=np.int64), np.zeros((0, model.feature_dim)))
    batch = buffer.as_batch()
    feats = l2_normalize(model.features(batch.x))
    labels = np.unique(batch.y)
    means = np.stack([feats[batch.y == c].mean(axis=0) for c in labels])
    return ClassMeans(labels, means)


def predict(
    model: MlpModel,
    x: np.ndarray,
    classifier: str = LINEAR,
    class_means: ClassMeans | None = None,
    batch_size: int = 128,
) -> np.ndarray:
    """Predicted labels under inference normalization; rows never influence each other."""
    if classifier == NCM and (class_means is None or len(class_means) == 0):
        raise ContractError("NCM inference requested without class means")
    if classifier not in (LINEAR, NCM):
        raise ContractError(f"unknown classifier {classifier!r}")
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), batch_size):
        chunk = x[start:start + batch_size]
        if classifier == LINEAR:
            out[start:start + batch_size] = np.argmax(model.predict_logits(chunk), axis=1)
        else:
            feats = l2_normalize(model.features(chunk))
            dist = ((feats[:, None, :] - class_means.means[None, :, :]) ** 2).sum(axis=2)
            out[start:start + batch_size] = class_means.labels[np.argmin(dist, axis=1)]
    return out


def evaluate_task(
    model: MlpModel,
    test_x: np.ndarray,
    test_y: np.ndarray,
    classifier: str = LINEAR,
    class_means: ClassMeans | None = None,
    batch_size: int = 128,
) -> float:
    if len(test_y) == 0:
        raise ContractError("cannot evaluate an empty test set")
    pred = predict(model, test_x, classifier, class_means, batch_size)
    return float(np.mean(pred == np.asarray(test_y)))


def acc_metric(R: np.ndarray) -> float:
    """Average accuracy over the final row of the accuracy matrix."""
    R = np.asarray(R, dtype=np.float64)
    last = R[-1]
    if np.any(np.isnan(last)):
        raise ContractError("final row of the accuracy matrix is incomplete")
    return float(last.sum() / len(last))


def bwt_metric(R: np.ndarray) -> float | None:
    """Mean of ``R[T, t] - R[t, t]`` over earlier tasks; ``None`` when there is only one task."""
    R = np.asarray(R, dtype=np.float64)
    T = R.shape[0]
    if T == 1:
        return None
    diffs = [R[T - 1, t] - R[t, t] for t in range(T - 1)]
    if any(np.isnan(d) for d in diffs):
        raise ContractError("accuracy matrix is missing diagonal or final-row entries")
    return float(sum(diffs) / (T - 1))


def evaluate_tasks(model, tasks, classifier=LINEAR, class_means=None) -> np.ndarray:
    return np.array([evaluate_task(model, t.test_x, t.test_y, classifier, class_means) for t in tasks])


def ema_drift_probe(
    model: MlpModel,
    batches: Iterable[np.ndarray],
    tasks: Sequence,
    classifier: str = LINEAR,
    class_means: ClassMeans | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-task accuracy before and after refreshing only the EMA with ``batches``.

    The running statistics are restored afterwards, and parameters are never
    touched.
    """
    saved = model.running_stats()
    before = evaluate_tasks(model, tasks, classifier, class_means)
    try:
        for batch in batches:
            ema_refresh_pass(model, batch)
        after = evaluate_tasks(model, tasks, classifier, class_means)
    finally:
        model.load_running_stats(saved)
    return before, after


def export_activations(model: MlpModel, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labels, linear-head predictions and penultimate features for every sample."""
    feats = model.features(x)
    pred = np.argmax(model.predict_logits(x), axis=1)
    return np.asarray(y, dtype=np.int64), pred, feats


def write_activations_csv(path: str | Path, labels, predictions, features) -> None:
    d = features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "prediction"] + [f"f{i}" for i in range(d)])
        for lab, pred, row in zip(labels, predictions, features):
            writer.writerow([int(lab), int(pred)] + [f"{v:.17g}" for v in row])


def read_activations_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    d = len(header) - 2
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    preds = np.array([int(r[1]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64).reshape(len(rows), d)
    return labels, preds, feats
