"""IoU scoring, best-threshold sweeps, and connected-component extraction.

Aggregate IoU is computed from confusion counts summed over the whole set
(micro-average); per-image IoUs are reported alongside for inspection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .network import Model, forward

THETA_GRID = np.arange(1, 100) / 100.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int


def iou(counts: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); defined as 1 when all three counts are zero."""
    denom = counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else counts.tp / denom


def confusion_from_masks(pred: np.ndarray, target: np.ndarray, class_id: int = 1) -> ConfusionCounts:
    """Pixel confusion counts of a hard prediction mask against a target mask."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} disagree")
    p = pred == class_id if pred.dtype != bool else pred
    t = target == class_id
    tp = int(np.count_nonzero(p & t))
    return ConfusionCounts(tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(t)) - tp)


def threshold_mask(probs: np.ndarray, class_id: int, theta: float) -> np.ndarray:
    """Mark pixels whose class probability is >= theta."""
    if not 0 < theta < 1:
        raise ShapeError(f"theta must be in (0, 1), got {theta}")
    channel_axis = probs.ndim - 3
    if not 0 <= class_id < probs.shape[channel_axis]:
        raise ShapeError(f"class_id {class_id} out of range for {probs.shape[channel_axis]} channels")
    return np.take(probs, class_id, axis=channel_axis) >= theta


def _iter_probs(probs):
    # accept an (N, C, H, W) array or any iterable of (C, H, W) / (1, C, H, W)
    for p in probs:
        yield p[0] if p.ndim == 4 else p


@dataclass(frozen=True)
class ThresholdSweep:
    theta: float
    iou: float
    counts: ConfusionCounts


def sweep_threshold(probs, targets, class_id: int) -> ThresholdSweep:
    """Find the threshold in {0.01, ..., 0.99} maximizing aggregate IoU.

    Ties return the smallest threshold. Histogram suffix sums give the counts
    for all 99 thresholds in one pass over the pixels.
    """
    pos_hist = np.zeros(THETA_GRID.size + 1, dtype=np.int64)
    neg_hist = np.zeros(THETA_GRID.size + 1, dtype=np.int64)
    total = 0
    for p, t in zip(_iter_probs(probs), targets):
        channel = np.asarray(p[class_id], dtype=np.float64).ravel()
        positive = (np.asarray(t) == class_id).ravel()
        below = np.searchsorted(THETA_GRID, channel, side="right")
        pos_hist += np.bincount(below[positive], minlength=pos_hist.size)
        neg_hist += np.bincount(below[~positive], minlength=neg_hist.size)
        total += 1
    if total == 0:
        raise ShapeError("sweep needs at least one image")
    pos_total = int(pos_hist.sum())
    tp = pos_total - np.cumsum(pos_hist)[: THETA_GRID.size]
    fp = int(neg_hist.sum()) - np.cumsum(neg_hist)[: THETA_GRID.size]
    fn = pos_total - tp
    denom = tp + fp + fn
    ious = np.where(denom > 0, tp / np.maximum(denom, 1), 1.0)
    best = int(np.argmax(ious))
    return ThresholdSweep(
        float(THETA_GRID[best]),
        float(ious[best]),
        ConfusionCounts(int(tp[best]), int(fp[best]), int(fn[best])),
    )


@dataclass(frozen=True)
class Region:
    class_id: int
    x0: int
    y0: int
    x1: int
    y1: int
    pixel_count: int
    centroid: tuple[float, float]


class _UnionFind:
    def __init__(self):
        self.parent = [0]

    def make(self) -> int:
        label = len(self.parent)
        self.parent.append(label)
        return label

    def find(self, label: int) -> int:
        root = label
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[label] != root:
            self.parent[label], label = root, self.parent[label]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra > rb:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return ra


def connected_components(mask: np.ndarray, class_id: int = 1) -> list[Region]:
    """4-connected components of a binary mask via two-pass union-find.

    Regions come back ordered by their first pixel in row-major scan order.
    """
    mask = np.asarray(mask) != 0
    height, width = mask.shape
    labels = np.zeros((height, width), dtype=np.int32)
    uf = _UnionFind()
    for y in range(height):
        row = mask[y]
        for x in range(width):
            if not row[x]:
                continue
            left = labels[y, x - 1] if x > 0 else 0
            up = labels[y - 1, x] if y > 0 else 0
            if left and up:
                labels[y, x] = uf.union(left, up)
            elif left or up:
                labels[y, x] = left or up
            else:
                labels[y, x] = uf.make()

    order: dict[int, int] = {}
    stats: dict[int, list] = {}
    for y in range(height):
        for x in range(width):
            label = labels[y, x]
            if not label:
                continue
            root = uf.find(label)
            if root not in order:
                order[root] = len(order)
                stats[root] = [0, x, y, x, y, 0.0, 0.0]  # count, x0, y0, x1, y1, sx, sy
            s = stats[root]
            s[0] += 1
            s[1] = min(s[1], x)
            s[2] = min(s[2], y)
            s[3] = max(s[3], x)
            s[4] = max(s[4], y)
            s[5] += x + 0.5
            s[6] += y + 0.5
    regions = []
    for root in sorted(order, key=order.get):
        count, x0, y0, x1, y1, sx, sy = stats[root]
        regions.append(
            Region(class_id, x0, y0, x1 + 1, y1 + 1, count, (sx / count, sy / count))
        )
    return regions


@dataclass
class ClassEval:
    class_id: int
    theta: float
    iou: float
    counts: ConfusionCounts
    per_image: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "id": self.class_id,
            "theta_star": self.theta,
            "iou": self.iou,
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn,
            "per_image": self.per_image,
        }


@dataclass
class EvalReport:
    config: str
    classes: list[ClassEval]

    def to_dict(self) -> dict:
        return {"config": self.config, "classes": [c.to_dict() for c in self.classes]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def class_result(self, class_id: int) -> ClassEval:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise ShapeError(f"no result for class {class_id}")


def _forward_all(model: Model, samples) -> list[np.ndarray]:
    return [forward(model, s.image)[0] for s in samples]


def evaluate(model: Model, samples, sweep_on=None) -> EvalReport:
    """Forward a test set and sweep the best threshold per object class.

    When sweep_on is given, thresholds are selected on those samples and the
    reported counts come from `samples` at the selected thresholds.
    """
    if not samples:
        raise ShapeError("evaluate needs at least one sample")
    probs = _forward_all(model, samples)
    targets = [s.target for s in samples]
    if sweep_on is None:
        sweep_probs, sweep_targets = probs, targets
    else:
        sweep_probs = _forward_all(model, sweep_on)
        sweep_targets = [s.target for s in sweep_on]
    results = []
    for class_id in range(1, model.config.classes):
        sweep = sweep_threshold(sweep_probs, sweep_targets, class_id)
        per_image = []
        tp = fp = fn = 0
        for p, t in zip(probs, targets):
            counts = confusion_from_masks(threshold_mask(p, class_id, sweep.theta), t, class_id)
            per_image.append(iou(counts))
            tp, fp, fn = tp + counts.tp, fp + counts.fp, fn + counts.fn
        total = ConfusionCounts(tp, fp, fn)
        results.append(ClassEval(class_id, sweep.theta, iou(total), total, per_image))
    return EvalReport(model.config.name, results)
