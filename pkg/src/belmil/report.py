"""Report emission: metrics JSON, PR-curve and attention CSVs, and figures."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport, PredictionSet, pr_curve  # noqa: E402


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def write_pr_csv(path, scores, positives) -> int:
    """Write (threshold, precision, recall) rows; returns the number of data rows."""
    thresholds, precision, recall = pr_curve(scores, positives)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for row in zip(thresholds, precision, recall):
            w.writerow([_fmt(v) for v in row])
    return len(thresholds)


def write_attention_csv(path, attention: dict) -> None:
    """Long format: one (bag_id, instance, alpha) row per instance."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bag_id", "instance", "alpha"])
        for bag_id, alpha in attention.items():
            for i, a in enumerate(np.asarray(alpha, dtype=np.float64)):
                w.writerow([bag_id, i, repr(float(a))])


def read_attention_csv(path) -> dict[str, np.ndarray]:
    rows: dict[str, list[float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(rec["bag_id"], []).append(float(rec["alpha"]))
    return {k: np.array(v) for k, v in rows.items()}


def emit_report(report: MetricsReport, preds: PredictionSet, out_dir, attention: dict | None = None) -> dict:
    """Write ``metrics.json``, ``pr_class<c>.csv`` per class with positives, and optionally ``attention.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {"metrics": out / "metrics.json"}
    report.save(written["metrics"])
    for c in range(preds.n_classes):
        pos = preds.labels == c
        if pos.any():
            path = out / f"pr_class{c}.csv"
            write_pr_csv(path, preds.probs[:, c], pos)
            written[f"pr_class{c}"] = path
    if attention is not None:
        written["attention"] = out / "attention.csv"
        write_attention_csv(written["attention"], attention)
    return written


# --- figures ----------------------------------------------------------------


def plot_pr_curves(preds: PredictionSet, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for c in range(preds.n_classes):
        pos = preds.labels == c
        if not pos.any():
            continue
        _, precision, recall = pr_curve(preds.probs[:, c], pos)
        area = float(np.sum(np.diff(recall) * precision[1:]))
        # each recall increment carries the precision at its right end
        ax.step(recall, precision, where="pre", label=f"class {c} (AP {area:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_pr_auc_summary(summary: dict, path) -> None:
    """Bar chart of per-class PR-AUC mean with sample-std error bars across folds."""
    per = summary.get("pr_auc", {})
    classes = [c for c in sorted(per, key=int) if per[c]["mean"] is not None]
    means = [per[c]["mean"] for c in classes]
    stds = [per[c]["std"] or 0.0 for c in classes]
    fig, ax = plt.subplots(figsize=(max(3, 0.8 * len(classes) + 2), 3.5))
    ax.bar(range(len(classes)), means, yerr=stds, capsize=4, color="0.6")
    ax.set_xticks(range(len(classes)), [f"class {c}" for c in classes])
    ax.set_ylabel("PR-AUC")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curves(folds: list[dict], path) -> None:
    """CE, BEL and validation accuracy per epoch, one line per fold."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for f, fold in enumerate(folds):
        epochs = fold["train"]["epochs"]
        x = [r["epoch"] for r in epochs]
        axes[0].plot(x, [r["ce"] for r in epochs], color=f"C{f}", label=f"fold {f} CE")
        axes[0].plot(x, [r["bel"] for r in epochs], color=f"C{f}", ls="--", label=f"fold {f} BEL")
        acc = [r["val_accuracy"] for r in epochs]
        if any(a is not None for a in acc):
            axes[1].plot(x, [np.nan if a is None else a for a in acc], color=f"C{f}", label=f"fold {f}")
    for ax in axes:
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("mean train loss")
    axes[0].legend(fontsize=7)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("validation accuracy")
    axes[1].set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_figures(out_dir, preds: PredictionSet | None = None, train_report: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if preds is not None:
        written.append(out / "pr_curves.png")
        plot_pr_curves(preds, written[-1])
    if train_report is not None:
        written.append(out / "training_curves.png")
        plot_training_curves(train_report["folds"], written[-1])
        if train_report.get("summary", {}).get("pr_auc"):
            written.append(out / "pr_auc_summary.png")
            plot_pr_auc_summary(train_report["summary"], written[-1])
    return written


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
