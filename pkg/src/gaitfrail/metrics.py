"""Evaluation metrics: micro-averaged multiclass AUROC, linearly weighted Cohen's
Kappa, confusion matrices, and cross-fold aggregation.

AUROC uses the rank formulation (ties get half credit, equivalent to the
trapezoidal ROC integral).  Kappa uses linear disagreement weights so adjacent
stage confusions cost half as much as extreme ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FrailtyLabel

N_CLASSES = 3

KAPPA_BANDS = [
    (0.21, "poor"),
    (0.41, "fair"),
    (0.61, "moderate"),
    (0.81, "substantial"),
    (float("inf"), "near-perfect"),
]


class MetricError(Exception):
    """Metric undefined for the given predictions (degenerate input)."""


@dataclass
class PredictionSet:
    """Per-participant class probabilities and true labels for one test fold."""

    participant_ids: list[str]
    probabilities: np.ndarray  # (N, 3), rows sum to 1
    true_labels: np.ndarray  # (N,) ints in {0,1,2}

    def __post_init__(self) -> None:
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        n = len(self.participant_ids)
        if self.probabilities.shape != (n, N_CLASSES):
            raise ValueError(f"probabilities must be ({n}, {N_CLASSES}), got {self.probabilities.shape}")
        if self.true_labels.shape != (n,):
            raise ValueError(f"true_labels must be ({n},), got {self.true_labels.shape}")
        if (self.probabilities < 0).any():
            raise ValueError("probabilities must be nonnegative")
        sums = self.probabilities.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError(f"probability rows must sum to 1 within 1e-6, got sums {sums}")

    @property
    def predicted_labels(self) -> np.ndarray:
        return self.probabilities.argmax(axis=1)

    def __len__(self) -> int:
        return len(self.participant_ids)


@dataclass
class EvalReport:
    fold_index: int
    confusion: np.ndarray  # (3, 3), rows = true, cols = predicted
    micro_auc: float
    weighted_kappa: float
    per_class_auc: dict[int, float] = field(default_factory=dict)
    n_test: int = 0


def _binary_auroc(labels: np.ndarray, scores: np.ndarray) -> float:
    """AUROC via the Mann-Whitney rank statistic with average ranks for ties."""
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined: need at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def micro_auroc(preds: PredictionSet, classes: tuple[int, ...] = (0, 1, 2)) -> float:
    """AUROC over the flattened one-vs-rest expansion of every (sample, class) pair.

    `classes` restricts the expansion (e.g. (0, 2) evaluates nonfrail-vs-frail
    on the samples of those two classes only, with probabilities renormalized).
    """
    keep = np.isin(preds.true_labels, classes)
    if not keep.any():
        raise MetricError("no samples in the requested classes")
    probs = preds.probabilities[keep][:, list(classes)]
    probs = probs / probs.sum(axis=1, keepdims=True)
    true = preds.true_labels[keep]
    labels = np.concatenate([(true == c).astype(np.int64) for c in classes])
    scores = np.concatenate([probs[:, i] for i in range(len(classes))])
    return _binary_auroc(labels, scores)


def per_class_auroc(preds: PredictionSet) -> dict[int, float]:
    """One-vs-rest AUROC per class (supplementary; NaN where degenerate)."""
    out: dict[int, float] = {}
    for c in range(N_CLASSES):
        labels = (preds.true_labels == c).astype(np.int64)
        try:
            out[c] = _binary_auroc(labels, preds.probabilities[:, c])
        except MetricError:
            out[c] = float("nan")
    return out


def confusion_matrix(preds: PredictionSet) -> np.ndarray:
    mat = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for t, p in zip(preds.true_labels, preds.predicted_labels):
        mat[t, p] += 1
    return mat


def weighted_kappa_from_confusion(confusion: np.ndarray) -> float:
    """Linearly weighted Cohen's Kappa from a (true x predicted) confusion matrix."""
    confusion = np.asarray(confusion, dtype=np.float64)
    k = confusion.shape[0]
    n = confusion.sum()
    if n == 0:
        raise MetricError("kappa undefined on an empty confusion matrix")
    idx = np.arange(k)
    weights = np.abs(idx[:, None] - idx[None, :]) / (k - 1)
    expected = np.outer(confusion.sum(axis=1), confusion.sum(axis=0)) / n
    expected_disagreement = (weights * expected).sum()
    if expected_disagreement == 0:
        raise MetricError("kappa undefined: single-class marginals on both axes")
    observed_disagreement = (weights * confusion).sum()
    return float(1.0 - observed_disagreement / expected_disagreement)


def weighted_kappa(preds: PredictionSet) -> float:
    if len(preds) == 0:
        raise MetricError("kappa undefined on an empty prediction set")
    return weighted_kappa_from_confusion(confusion_matrix(preds))


def kappa_band(kappa: float) -> str:
    """Map a kappa value to its qualitative agreement band (inclusive lower bounds)."""
    if not -1.0 <= kappa <= 1.0:
        raise ValueError(f"kappa {kappa} outside [-1, 1]")
    for upper, name in KAPPA_BANDS:
        if kappa < upper:
            return name
    return KAPPA_BANDS[-1][1]


def evaluate_predictions(preds: PredictionSet, fold_index: int = 0) -> EvalReport:
    return EvalReport(
        fold_index=fold_index,
        confusion=confusion_matrix(preds),
        micro_auc=micro_auroc(preds),
        weighted_kappa=weighted_kappa(preds),
        per_class_auc=per_class_auroc(preds),
        n_test=len(preds),
    )


def aggregate_folds(reports: list[EvalReport]) -> dict[str, tuple[float, float]]:
    """Unweighted mean and sample (n-1) std of each metric across folds."""
    if len(reports) < 2:
        raise ValueError(f"need >= 2 fold reports to aggregate, got {len(reports)}")
    out = {}
    for name in ("micro_auc", "weighted_kappa"):
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = (float(values.mean()), float(values.std(ddof=1)))
    return out


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f} ± {std:.4f}"


def write_predictions_csv(preds: PredictionSet, path: str | Path) -> None:
    """Export so metrics can be recomputed without the model."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["participant_id", "true", "p_nonfrail", "p_prefrail", "p_frail"])
        for pid, true, row in zip(preds.participant_ids, preds.true_labels, preds.probabilities):
            writer.writerow([pid, int(true), f"{row[0]:.9f}", f"{row[1]:.9f}", f"{row[2]:.9f}"])


def read_predictions_csv(path: str | Path) -> PredictionSet:
    ids: list[str] = []
    labels: list[int] = []
    probs: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["participant_id"])
            labels.append(int(row["true"]))
            p = np.array([float(row["p_nonfrail"]), float(row["p_prefrail"]), float(row["p_frail"])])
            probs.append((p / p.sum()).tolist())
    return PredictionSet(ids, np.array(probs), np.array(labels))


__all__ = [
    "PredictionSet",
    "EvalReport",
    "MetricError",
    "micro_auroc",
    "per_class_auroc",
    "confusion_matrix",
    "weighted_kappa",
    "weighted_kappa_from_confusion",
    "kappa_band",
    "evaluate_predictions",
    "aggregate_folds",
    "format_mean_std",
    "write_predictions_csv",
    "read_predictions_csv",
    "FrailtyLabel",
]
