"""Bag-level classification metrics: accuracy, macro F1, macro AUROC, PR-AUC."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


@dataclass
class PredictionSet:
    bag_ids: list[str]
    labels: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        if len(self.bag_ids) != len(self.labels) or len(self.labels) != len(self.probs):
            raise ValueError("bag_ids, labels and probs must have equal length")
        if len(self.labels) and not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-5):
            raise ValueError("probability rows must sum to 1")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def predicted(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        return np.argmax(self.probs, axis=1)

    def to_json(self) -> dict:
        return {
            "predictions": [
                {"bag_id": b, "label": int(y), "p": [float(v) for v in row]}
                for b, y, row in zip(self.bag_ids, self.labels, self.probs)
            ]
        }

    @classmethod
    def from_json(cls, doc) -> "PredictionSet":
        rows = doc["predictions"]
        return cls([r["bag_id"] for r in rows], [r["label"] for r in rows], [r["p"] for r in rows])


def _require(preds: PredictionSet):
    if len(preds) == 0:
        raise ValueError("empty prediction set")


def accuracy(preds: PredictionSet) -> float:
    _require(preds)
    return float(np.mean(preds.predicted == preds.labels))


def confusion_matrix(preds: PredictionSet) -> np.ndarray:
    k = preds.n_classes
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (preds.labels, preds.predicted), 1)
    return cm


def f1_per_class(preds: PredictionSet) -> np.ndarray:
    cm = confusion_matrix(preds)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(preds: PredictionSet) -> float:
    _require(preds)
    return float(f1_per_class(preds).mean())


def binary_auroc(scores, positives) -> float:
    """Mann-Whitney AUROC; ties between a positive and a negative count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos, n_neg = positives.sum(), (~positives).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auroc_per_class(preds: PredictionSet) -> dict[int, float]:
    """One-vs-rest AUROC for every class with both positives and negatives."""
    out = {}
    for c in range(preds.n_classes):
        pos = preds.labels == c
        if pos.any() and (~pos).any():
            out[c] = binary_auroc(preds.probs[:, c], pos)
    return out


def auroc_macro(preds: PredictionSet) -> float:
    _require(preds)
    per = auroc_per_class(preds)
    if not per:
        raise ValueError("no class has both positive and negative bags")
    return float(np.mean(list(per.values())))


def pr_curve(scores, positives):
    """Precision/recall at every distinct score threshold, highest first.

    Returned arrays include two endpoints: threshold +inf (recall 0,
    precision 1) and -inf (everything positive).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = positives.sum()
    if n_pos == 0:
        raise ValueError("PR curve needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positives[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    thresholds = s[last]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    thresholds = np.r_[np.inf, thresholds, -np.inf]
    precision = np.r_[1.0, precision, n_pos / len(s)]
    recall = np.r_[0.0, recall, 1.0]
    return thresholds, precision, recall


def average_precision(scores, positives) -> float:
    _, precision, recall = pr_curve(scores, positives)
    return float(np.sum(np.diff(recall) * precision[1:]))


def pr_auc_per_class(preds: PredictionSet) -> dict[int, float | None]:
    """Step-wise PR-AUC per class; classes without positives map to None."""
    out = {}
    for c in range(preds.n_classes):
        pos = preds.labels == c
        out[c] = average_precision(preds.probs[:, c], pos) if pos.any() else None
    return out


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    auroc_macro: float | None
    auroc_per_class: dict[int, float]
    auroc_skipped: list[int]
    pr_auc: dict[int, float | None]
    confusion: list[list[int]]
    n_bags: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["auroc_per_class"] = {str(k): v for k, v in self.auroc_per_class.items()}
        d["pr_auc"] = {str(k): v for k, v in self.pr_auc.items()}
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        d = dict(doc)
        d["auroc_per_class"] = {int(k): v for k, v in d["auroc_per_class"].items()}
        d["pr_auc"] = {int(k): v for k, v in d["pr_auc"].items()}
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


def evaluate(preds: PredictionSet) -> MetricsReport:
    _require(preds)
    per = auroc_per_class(preds)
    return MetricsReport(
        accuracy=accuracy(preds),
        macro_f1=macro_f1(preds),
        auroc_macro=float(np.mean(list(per.values()))) if per else None,
        auroc_per_class=per,
        auroc_skipped=[c for c in range(preds.n_classes) if c not in per],
        pr_auc=pr_auc_per_class(preds),
        confusion=confusion_matrix(preds).tolist(),
        n_bags=len(preds),
    )


def mean_std(values) -> dict:
    """Mean and sample (n-1) standard deviation; std is None for a single value."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "std": None, "n": 0}
    std = float(np.std(v, ddof=1)) if v.size > 1 else None
    return {"mean": float(v.mean()), "std": std, "n": int(v.size)}


def aggregate(reports: list[MetricsReport]) -> dict:
    """Fold-wise mean and sample std of every scalar metric."""
    classes = sorted({c for r in reports for c in r.pr_auc})
    return {
        "accuracy": mean_std(r.accuracy for r in reports),
        "macro_f1": mean_std(r.macro_f1 for r in reports),
        "auroc_macro": mean_std(r.auroc_macro for r in reports),
        "pr_auc": {str(c): mean_std(r.pr_auc.get(c) for r in reports) for c in classes},
        "std_convention": "sample (ddof=1)",
    }
