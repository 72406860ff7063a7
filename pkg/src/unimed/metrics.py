"""mAP, mAcc and Dice."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np


class MetricError(ValueError):
    pass


COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


@dataclass
class MetricReport:
    task: str
    dataset: str
    metric: str
    value: float
    per_class: dict[str, float] = field(default_factory=dict)
    count: int = 0

    def to_line(self) -> str:
        per = ",".join(f"{k}={v:.6f}" for k, v in sorted(self.per_class.items()))
        return f"task={self.task}\tdataset={self.dataset}\tmetric={self.metric}\tvalue={self.value:.6f}\tn={self.count}\tper_class={per}"


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def mean_accuracy(preds: Sequence[Hashable], gts: Sequence[Hashable], classes: Sequence[Hashable] | None = None) -> tuple[float, dict]:
    """Unweighted mean of per-class recall over classes present in ``gts``."""
    if len(gts) == 0:
        raise MetricError("mean accuracy is undefined without ground truth")
    if len(preds) != len(gts):
        raise MetricError("preds and gts differ in length")
    hit: dict = defaultdict(int)
    seen: dict = defaultdict(int)
    for p, g in zip(preds, gts):
        seen[g] += 1
        hit[g] += int(p == g)
    labels = [c for c in (classes if classes is not None else sorted(seen, key=str)) if seen[c]]
    per = {c: hit[c] / seen[c] for c in labels}
    return float(np.mean(list(per.values()))), per


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class Detection:
    image: int
    box: tuple[float, float, float, float]
    score: float
    label: Hashable


@dataclass
class GroundTruth:
    image: int
    box: tuple[float, float, float, float]
    label: Hashable


def _ranked(dets: list[Detection], gts_by_image: dict) -> list[Detection]:
    """Score-descending; ties by higher best-IoU against same-class truth, then input order."""
    def best_iou(d):
        return max((box_iou(d.box, g.box) for g in gts_by_image.get(d.image, [])), default=0.0)

    keyed = [(-d.score, -best_iou(d), k, d) for k, d in enumerate(dets)]
    keyed.sort(key=lambda t: t[:3])
    return [t[3] for t in keyed]


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the PR curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def class_ap(dets: list[Detection], gts: list[GroundTruth], threshold: float) -> float:
    if not gts:
        return 0.0
    by_image: dict = defaultdict(list)
    for g in gts:
        by_image[g.image].append(g)
    taken = {img: [False] * len(v) for img, v in by_image.items()}
    tp = []
    for d in _ranked(dets, by_image):
        cands = by_image.get(d.image, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(cands):
            if taken[d.image][j]:
                continue
            iou = box_iou(d.box, g.box)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= threshold:
            taken[d.image][best_j] = True
            tp.append(1)
        else:
            tp.append(0)
    if not tp:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(tp) + 1)
    return average_precision(recall, precision)


def mean_ap(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> tuple[float, dict]:
    """Mean over ground-truth classes of AP averaged over IoU thresholds."""
    labels = sorted({g.label for g in gts}, key=str)
    if not labels:
        return 0.0, {}
    per = {}
    for c in labels:
        cd = [d for d in dets if d.label == c]
        cg = [g for g in gts if g.label == c]
        per[c] = float(np.mean([class_ap(cd, cg, t) for t in thresholds]))
    return float(np.mean(list(per.values()))), per
