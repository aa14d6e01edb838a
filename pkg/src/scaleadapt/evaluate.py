"""Segmentation metrics and the analysis reports.

Confusion rows are ground truth, columns are predictions; ignore pixels never
enter the counts.  Classes absent from both prediction and ground truth are
excluded from the mean IoU rather than counted as 0 or 1.
"""

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import IGNORE_LABEL


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Add one image's (gt, pred) pairs into the confusion matrix, in place."""
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} dims differ")
    n = cm.shape[0]
    keep = gt != IGNORE_LABEL
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= n or p.max() >= n):
        raise ValueError(f"class id out of range for {n}-class confusion matrix")
    cm += np.bincount(n * g + p, minlength=n * n).reshape(n, n)
    return cm


@dataclass
class EvalReport:
    per_class_iou: list  # float or None where the class is absent everywhere
    miou: float
    pixel_accuracy: float
    image_count: int
    confusion: Optional[np.ndarray] = None

    def defined_classes(self):
        return [c for c, v in enumerate(self.per_class_iou) if v is not None]


def miou(cm: np.ndarray, image_count: int = 0) -> EvalReport:
    """Per-class IoU = TP / (TP + FP + FN); the mean skips undefined classes."""
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0).astype(np.float64) - tp
    fn = cm.sum(axis=1).astype(np.float64) - tp
    denom = tp + fp + fn
    per_class = [None if denom[c] == 0 else float(tp[c] / denom[c]) for c in range(cm.shape[0])]
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise ValueError("no class is defined in the confusion matrix")
    return EvalReport(
        per_class_iou=per_class,
        miou=float(np.mean(defined)),
        pixel_accuracy=float(tp.sum() / total),
        image_count=image_count,
        confusion=cm,
    )


def evaluate_model(predict_fn, dataset, ids: Optional[Sequence[str]] = None) -> EvalReport:
    """Accumulate argmax predictions over a labeled dataset and report mIoU."""
    from .tensor import argmax_labels

    eval_ids = list(ids) if ids is not None else list(dataset.ids)
    cm = None
    for image_id in eval_ids:
        gt = dataset.load_labels(image_id)
        if gt is None:
            raise ValueError(f"image {image_id!r} carries no labels; cannot evaluate")
        p = predict_fn(dataset.load_image(image_id))
        if cm is None:
            cm = new_confusion(p.shape[0])
        accumulate(cm, argmax_labels(p), gt)
    if cm is None:
        raise ValueError("no images to evaluate")
    return miou(cm, image_count=len(eval_ids))


def report_csv(report: EvalReport) -> str:
    """`class,iou` rows (blank for undefined classes) plus the miou row."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "iou"])
    for c, v in enumerate(report.per_class_iou):
        writer.writerow([c, "" if v is None else f"{v:.6f}"])
    writer.writerow(["miou", f"{report.miou:.6f}"])
    return buf.getvalue()


def selection_history_csv(histories: dict) -> str:
    """Per-class selected-image counts per round per configuration.

    `histories` maps a configuration label to its list of SelectionResult,
    in round order.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config", "round", "class", "count"])
    for label in sorted(histories):
        for result in histories[label]:
            for c, count in enumerate(result.counts):
                writer.writerow([label, result.round_index, c, int(count)])
    return buf.getvalue()
