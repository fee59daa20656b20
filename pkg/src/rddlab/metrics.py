"""Confusion-matrix segmentation metrics and difficulty-map summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# reserved for annotated "ignore" pixels; the synthetic data never uses it
IGNORE_LABEL = 255


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = field(default=None)  # rows = ground truth, cols = prediction

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, predictions, labels, ignore_label: int | None = None) -> ConfusionMatrix:
    pred = np.asarray(predictions).reshape(-1)
    gt = np.asarray(labels).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"predictions {np.shape(predictions)} and labels {np.shape(labels)} differ")
    if ignore_label is not None:
        keep = gt != ignore_label
        pred, gt = pred[keep], gt[keep]
    C = cm.num_classes
    for name, arr in (("prediction", pred), ("label", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= C):
            bad = arr[(arr < 0) | (arr >= C)][0]
            raise ValueError(f"{name} class {int(bad)} out of range [0, {C})")
    cm.counts += np.bincount(gt.astype(np.int64) * C + pred.astype(np.int64), minlength=C * C).reshape(C, C)
    return cm


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN for classes absent from both truth and prediction."""
    diag = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(0) + cm.counts.sum(1) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, diag / union, np.nan)


def miou(cm: ConfusionMatrix) -> float:
    iou = per_class_iou(cm)
    present = ~np.isnan(iou)
    if not present.any():
        raise ValueError("mIoU undefined: no class occurs in labels or predictions")
    return float(iou[present].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    return float(np.trace(cm.counts) / total) if total else float("nan")


def difficulty_stats(rd, bins: int = 16) -> dict:
    values = getattr(rd, "values", rd)
    values = np.asarray(values, dtype=np.float64)
    hist, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return {
        "mean": float(values.mean()) if values.size else float("nan"),
        "active_fraction": float(np.mean(values > 0)) if values.size else 0.0,
        "histogram": hist.tolist(),
    }


def metrics_columns(num_classes: int) -> list[str]:
    return (
        ["iter", "stage", "miou", "pixel_acc"]
        + [f"iou_{c}" for c in range(num_classes)]
        + ["mean_rd", "active_fraction", "loss_total", "loss_task_weighted", "loss_kd", "loss_extras"]
    )


class MetricsWriter:
    """Append-only CSV with the evaluation schema; floats written with repr."""

    def __init__(self, path: str | Path, num_classes: int):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.columns = metrics_columns(num_classes)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerow(self.columns)

    def write(self, row: dict) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise KeyError(f"metrics row missing columns: {sorted(missing)}")
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in self.columns])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
