"""Mean intersection-over-union with class 0 ignored."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError


@dataclass(frozen=True)
class MiouResult:
    miou: float | None  # percent; None when no class has a nonempty union
    per_class: dict[int, float]  # IoU in [0, 1] for classes with nonempty union

    @property
    def defined(self) -> bool:
        return self.miou is not None


def confusion(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if pred.shape != labels.shape:
        raise DataError(f"prediction length {pred.size} != label length {labels.size}")
    keep = labels != 0
    return np.bincount(labels[keep] * num_classes + pred[keep], minlength=num_classes**2).reshape(
        num_classes, num_classes
    )


def miou_from_confusion(cm: np.ndarray) -> MiouResult:
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - tp
    per_class = {c: float(tp[c] / union[c]) for c in range(1, len(cm)) if union[c] > 0}
    if not per_class:
        return MiouResult(None, {})
    return MiouResult(100.0 * float(np.mean(list(per_class.values()))), per_class)


def miou(pred: np.ndarray, labels: np.ndarray, num_classes: int = 14) -> MiouResult:
    """IoU per class 1..C-1 over nodes whose label is not 0, averaged, in percent."""
    return miou_from_confusion(confusion(pred, labels, num_classes))
