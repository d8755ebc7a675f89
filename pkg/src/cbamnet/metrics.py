"""Confusion matrices, per-class and macro scores, one-vs-rest ROC/AUC,
multi-seed aggregation, and report emission.

ROC curves place one vertex per distinct score, thresholds descending, so
tied scores move together and the trapezoidal area equals the tie-corrected
Mann-Whitney statistic P(s+ > s-) + 0.5 * P(s+ = s-) exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES
from .fsio import atomic_write_text

DISPLAY_NAMES = ("Normal", "Bacterial Pneumonia", "Viral Pneumonia")


def confusion_matrix(y_true, y_pred, k: int = NUM_CLASSES) -> np.ndarray:
    """K x K counts; rows are the true class, columns the predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label arrays differ in length: {y_true.shape} vs {y_pred.shape}")
    for name, labels in (("true", y_true), ("predicted", y_pred)):
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"{name} label out of range [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    auc: float | None = None


@dataclass
class ClassReport:
    per_class: list[ClassMetrics]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc: float | None = None
    warnings: list[str] = field(default_factory=list)


def classification_report(cm: np.ndarray, aucs=None) -> ClassReport:
    """Precision/recall/F1 per class plus unweighted macro averages.

    An empty predicted column yields precision 0 with a warning rather than an
    undefined value, keeping the macro average total.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("classification_report needs a non-empty confusion matrix")
    per_class = []
    warnings = []
    for c in range(cm.shape[0]):
        col = cm[:, c].sum()
        row = cm[c, :].sum()
        if col == 0:
            warnings.append(f"class {CLASS_NAMES[c] if c < len(CLASS_NAMES) else c}: "
                            "no predictions, precision reported as 0")
        precision = cm[c, c] / col if col else 0.0
        recall = cm[c, c] / row if row else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        auc = None if aucs is None else float(aucs[c])
        per_class.append(ClassMetrics(precision, recall, f1, int(row), auc))
    macro_auc = None
    if aucs is not None:
        macro_auc = float(np.mean([m.auc for m in per_class]))
    return ClassReport(
        per_class=per_class,
        accuracy=float(np.trace(cm) / total),
        macro_precision=float(np.mean([m.precision for m in per_class])),
        macro_recall=float(np.mean([m.recall for m in per_class])),
        macro_f1=float(np.mean([m.f1 for m in per_class])),
        macro_auc=macro_auc,
        warnings=warnings,
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray


def roc_curve_ovr(scores: np.ndarray, labels: np.ndarray, class_index: int) -> RocCurve:
    """One-vs-rest ROC for one class from (N, K) probability rows.

    Thresholds sweep the distinct class scores in descending order; each adds
    a single vertex, so ties advance both rates together. The curve starts at
    (0,0) and ends at (1,1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(np.abs(scores.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("score rows must sum to 1 within 1e-6")
    positive = labels == class_index
    n_pos = int(positive.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"class {class_index} needs both positives and negatives, got {n_pos}/{n_neg}")
    s = scores[:, class_index]
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    pos_sorted = positive[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(~pos_sorted)
    # Keep only the last index of each tied run: one vertex per distinct score.
    last_of_run = np.append(s_sorted[1:] != s_sorted[:-1], True)
    fpr = np.concatenate(([0.0], fp[last_of_run] / n_neg))
    tpr = np.concatenate(([0.0], tp[last_of_run] / n_pos))
    return RocCurve(fpr=fpr, tpr=tpr)


def auc_trapezoid(curve: RocCurve) -> float:
    """Trapezoidal area over the false-positive rate axis."""
    return float(np.trapezoid(curve.tpr, curve.fpr))


@dataclass
class RunAggregate:
    mean: float
    std: float  # sample standard deviation, n-1 denominator
    n: int
    values: list[float] = field(default_factory=list)


def aggregate_runs(values) -> RunAggregate:
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ValueError(f"aggregation needs at least 2 runs, got {len(values)}")
    arr = np.asarray(values)
    if np.all(arr == arr[0]):
        # Coinciding runs must aggregate to std exactly 0; the two-pass
        # formula can round the mean off the common value and miss that.
        return RunAggregate(mean=values[0], std=0.0, n=len(values), values=values)
    return RunAggregate(mean=float(arr.mean()), std=float(arr.std(ddof=1)),
                        n=len(values), values=values)


def format_mean_std_percent(agg: RunAggregate) -> str:
    """e.g. accuracies (0.8433, std 0.0153) -> '84.33% ± 1.53%'."""
    return f"{100 * agg.mean:.2f}% ± {100 * agg.std:.2f}%"


def format_mean_std(agg: RunAggregate, digits: int = 4) -> str:
    return f"{agg.mean:.{digits}f} ± {agg.std:.{digits}f}"


def config_digest(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


def report_to_dict(report: ClassReport, cm: np.ndarray) -> dict:
    return {
        "accuracy": report.accuracy,
        "confusion_matrix": np.asarray(cm).tolist(),
        "per_class": {
            CLASS_NAMES[c]: {
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
                "support": m.support,
                "auc": m.auc,
            }
            for c, m in enumerate(report.per_class)
        },
        "macro": {
            "precision": report.macro_precision,
            "recall": report.macro_recall,
            "f1": report.macro_f1,
            "auc": report.macro_auc,
        },
        "warnings": report.warnings,
    }


_AGGREGATE_METRICS = (
    ("accuracy", lambda r: r["accuracy"]),
    ("macro_precision", lambda r: r["macro"]["precision"]),
    ("macro_recall", lambda r: r["macro"]["recall"]),
    ("macro_f1", lambda r: r["macro"]["f1"]),
    ("macro_auc", lambda r: r["macro"]["auc"]),
)


def aggregate_report_dicts(per_seed: dict[int, dict]) -> dict:
    """Mean and sample std of every headline metric across per-seed reports."""
    aggregate = {}
    metrics = list(_AGGREGATE_METRICS)
    for name in CLASS_NAMES:
        for key in ("precision", "recall", "f1", "auc"):
            metrics.append((f"{name}_{key}", lambda r, n=name, k=key: r["per_class"][n][k]))
    for metric_name, getter in metrics:
        values = [getter(r) for r in per_seed.values()]
        if any(v is None for v in values):
            continue
        agg = aggregate_runs(values)
        aggregate[metric_name] = {"mean": agg.mean, "std": agg.std, "n": agg.n}
    return aggregate


def render_report_text(per_seed: dict[int, dict], aggregate: dict, seeds: list[int]) -> str:
    """Human-readable table mirroring the per-class results layout.

    With several seeds, cells show mean ± sample std; with a single run they
    show the run's values directly.
    """
    single = per_seed[seeds[0]] if len(seeds) == 1 else None
    lines = []
    lines.append(f"Seeds: {', '.join(str(s) for s in seeds)}   (n = {len(seeds)})")
    if aggregate.get("accuracy") is not None:
        acc = aggregate["accuracy"]
        lines.append(f"Test accuracy: {100 * acc['mean']:.2f}% ± {100 * acc['std']:.2f}%")
    elif single is not None:
        lines.append(f"Test accuracy: {100 * single['accuracy']:.2f}%")
    lines.append("")
    header = f"{'Class':<22}{'Precision':>18}{'Recall':>18}{'F1-Score':>18}{'AUC':>20}"
    lines.append(header)
    lines.append("-" * len(header))

    def cell(prefix, key, digits=4):
        entry = aggregate.get(f"{prefix}_{key}")
        if entry is not None:
            return f"{entry['mean']:.{digits}f} ± {entry['std']:.{digits}f}"
        if single is not None:
            block = single["macro"] if prefix == "macro" else single["per_class"][prefix]
            value = block[key]
            return "n/a" if value is None else f"{value:.{digits}f}"
        return "n/a"

    for c, name in enumerate(CLASS_NAMES):
        lines.append(f"{DISPLAY_NAMES[c]:<22}"
                     f"{cell(name, 'precision'):>18}"
                     f"{cell(name, 'recall'):>18}"
                     f"{cell(name, 'f1'):>18}"
                     f"{cell(name, 'auc'):>20}")
    lines.append(f"{'Macro Average':<22}"
                 f"{cell('macro', 'precision'):>18}"
                 f"{cell('macro', 'recall'):>18}"
                 f"{cell('macro', 'f1'):>18}"
                 f"{cell('macro', 'auc'):>20}")
    lines.append("")
    for seed in seeds:
        r = per_seed[seed]
        lines.append(f"seed {seed}: accuracy {100 * r['accuracy']:.2f}%")
    return "\n".join(lines) + "\n"


def emit_report(per_seed: dict[int, dict], out_dir, seeds: list[int],
                digest: str, roc_points: dict[str, list] | None = None) -> dict:
    """Write report.json, report.txt, and per-class ROC CSVs; returns the dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aggregate = aggregate_report_dicts(per_seed) if len(per_seed) >= 2 else {}
    payload = {
        "version": 1,
        "config_digest": digest,
        "seeds": list(seeds),
        "runs": {str(seed): per_seed[seed] for seed in seeds},
        "aggregate": aggregate,
    }
    atomic_write_text(out_dir / "report.json", json.dumps(payload, indent=2) + "\n")
    atomic_write_text(out_dir / "report.txt",
                      render_report_text(per_seed, aggregate, list(seeds)))
    if roc_points:
        for class_name, points in roc_points.items():
            rows = "\n".join(f"{fpr!r},{tpr!r}" for fpr, tpr in points)
            atomic_write_text(out_dir / f"roc_{class_name}.csv", "fpr,tpr\n" + rows + "\n")
    return payload
