"""Confusion matrices, IoU/mIoU, accumulated forgetting and the metric matrix."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def confusion_matrix(pred, target, num_classes: int) -> np.ndarray:
    """C x C counts; rows are ground truth, columns are predictions."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    target = np.asarray(target).reshape(-1).astype(np.int64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target sizes differ")
    idx = target * num_classes + pred
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_scores(cm) -> tuple[np.ndarray, float]:
    """Per-class IoU and mIoU, both in percent.

    Classes with zero union get NaN and are left out of the mean.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, 100.0 * tp / union, np.nan)
    return iou, float(np.nanmean(iou))


def accumulated_forgetting(m: "MetricMatrix | list") -> float:
    """Sum over targets 1..K-1 of (score right after learning it - score at the end)."""
    grid = m.miou if isinstance(m, MetricMatrix) else m
    K = len(grid)
    total = 0.0
    for k in range(K - 1):
        first, last = grid[k][k], grid[k][K - 1]
        if first is None or last is None:
            raise ValueError(f"metric matrix is missing entries for target {k + 1}")
        total += first - last
    return total


def forgetting_from_drops(drops) -> float:
    """Accumulated forgetting when only the per-target drops are known."""
    return float(sum(drops))


def miou_average(m: "MetricMatrix | list") -> float:
    """Mean over targets of the final-step mIoU."""
    grid = m.miou if isinstance(m, MetricMatrix) else m
    finals = [row[-1] for row in grid]
    if any(v is None for v in finals):
        raise ValueError("final step is incomplete")
    return float(np.mean(finals))


@dataclass
class MetricMatrix:
    """``miou[k][s]``: mIoU (%) of target k measured after step s (None for s < k)."""

    targets: list[str]
    miou: list[list[float | None]] = field(default_factory=list)
    per_class: dict[str, dict[str, list[float | None]]] = field(default_factory=dict)

    @classmethod
    def empty(cls, targets) -> "MetricMatrix":
        K = len(targets)
        return cls(list(targets), [[None] * K for _ in range(K)], {t: {} for t in targets})

    def record(self, target_idx: int, step_idx: int, miou: float, per_class_iou) -> None:
        if step_idx < target_idx:
            raise ValueError("a target cannot be evaluated before its own step")
        self.miou[target_idx][step_idx] = float(miou)
        self.per_class[self.targets[target_idx]][str(step_idx + 1)] = [
            None if np.isnan(v) else float(v) for v in per_class_iou
        ]

    @property
    def num_steps(self) -> int:
        return len(self.targets)

    def complete(self) -> bool:
        return all(self.miou[k][s] is not None for k in range(self.num_steps) for s in range(k, self.num_steps))

    def to_json(self) -> dict:
        out = {
            "targets": self.targets,
            "steps": list(range(1, self.num_steps + 1)),
            "miou": self.miou,
            "per_class": self.per_class,
            "af": None,
            "miou_avg": None,
        }
        if self.complete():
            out["af"] = accumulated_forgetting(self)
            out["miou_avg"] = miou_average(self)
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MetricMatrix":
        d = json.loads(Path(path).read_text())
        return cls(d["targets"], d["miou"], d.get("per_class", {}))
