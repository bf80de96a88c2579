"""Metrics: IoU, AP at IoU 0.5, nearest-centroid clustering, run statistics.

Pure functions: no model or world imports. Detections are duck-typed records
with `box`, `class_id`, `confidence`; ground truths are (box, class_id) pairs.
Boxes are (x1, y1, x2, y2), inclusive-exclusive, integer or float.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor

IOU_MATCH = 0.5


def _area(box) -> float:
    x1, y1, x2, y2 = box
    return max(0.0, x2 - x1) * max(0.0, y2 - y1)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    if _area(a) <= 0 or _area(b) <= 0:
        raise ContractError(f"degenerate box in iou: {a} vs {b}")
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    if inter == 0.0:
        return 0.0
    return inter / (_area(a) + _area(b) - inter)


def ap50(detections_by_scene: dict, gts_by_scene: dict) -> dict:
    """Per-class average precision at IoU 0.5, all-point interpolation.

    detections_by_scene: scene id -> list of records with box/class_id/confidence.
    gts_by_scene: scene id -> list of (box, class_id).
    Classes with ground truth and no detections score 0; classes with
    detections but no ground truth are skipped (AP undefined).
    """
    gt_count = {}
    for scene_id, gts in gts_by_scene.items():
        for _, class_id in gts:
            gt_count[class_id] = gt_count.get(class_id, 0) + 1

    flat = []  # (class_id, confidence, scene_id, order within scene, box)
    for scene_id in sorted(detections_by_scene):
        for order, det in enumerate(detections_by_scene[scene_id]):
            flat.append((det.class_id, det.confidence, scene_id, order, det.box))

    result = {}
    for class_id, n_gt in sorted(gt_count.items()):
        dets = [f for f in flat if f[0] == class_id]
        dets.sort(key=lambda f: (-f[1], f[2], f[3]))
        matched = {scene_id: set() for scene_id in gts_by_scene}
        tp = []
        for _, _, scene_id, _, box in dets:
            candidates = [
                (i, gt_box)
                for i, (gt_box, gt_class) in enumerate(gts_by_scene.get(scene_id, []))
                if gt_class == class_id and i not in matched[scene_id]
            ]
            best, best_iou = None, 0.0
            for i, gt_box in candidates:
                v = iou(box, gt_box)
                if v >= IOU_MATCH and v > best_iou:
                    best, best_iou = i, v
            if best is not None:
                matched[scene_id].add(best)
                tp.append(1)
            else:
                tp.append(0)
        result[class_id] = _ap_from_matches(tp, n_gt)
    return result


def _ap_from_matches(tp: list, n_gt: int) -> float:
    """Area under the exact precision-recall curve for a sorted match list."""
    if n_gt == 0 or not tp:
        return 0.0
    recalls, precisions = [], []
    hits = 0
    for rank, hit in enumerate(tp, start=1):
        hits += hit
        recalls.append(hits / n_gt)
        precisions.append(hits / rank)
    # precision envelope, monotone non-increasing from the right
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap, prev_recall = 0.0, 0.0
    for recall, precision in zip(recalls, precisions):
        if recall > prev_recall:
            ap += (recall - prev_recall) * precision
            prev_recall = recall
    return ap


def centroid_accuracy(features, labels) -> float:
    """Fraction of vectors whose own class mean is strictly L1-nearest.

    Means are computed over the scored vectors themselves; distance ties
    count as incorrect.
    """
    values = features.values if isinstance(features, Tensor) else np.asarray(features)
    labels = list(labels)
    if len(labels) != values.shape[0]:
        raise ContractError(f"{values.shape[0]} vectors for {len(labels)} labels")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ContractError("centroid accuracy needs at least two classes")
    means = {
        c: values[[i for i, l in enumerate(labels) if l == c]].mean(axis=0)
        for c in classes
    }
    correct = 0
    for vec, label in zip(values, labels):
        own = np.abs(vec - means[label]).sum()
        others = [np.abs(vec - means[c]).sum() for c in classes if c != label]
        if own < min(others):
            correct += 1
    return correct / len(labels)


def export_embeddings(features, labels, stage: str, path) -> None:
    """Write vectors as CSV: class_id, stage, then one column per dimension.

    Values are written with full repr precision so a parse round-trips exactly.
    """
    values = features.values if isinstance(features, Tensor) else np.asarray(features)
    labels = list(labels)
    if len(labels) != values.shape[0]:
        raise ContractError(f"{values.shape[0]} vectors for {len(labels)} labels")
    d = values.shape[1] if values.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "stage"] + [f"f{i}" for i in range(d)])
        for label, vec in zip(labels, values):
            writer.writerow([label, stage] + [repr(float(v)) for v in vec])


def load_embeddings(path):
    """Parse an embedding CSV back to (features, labels, stages)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = [int(r[0]) for r in rows[1:]]
    stages = [r[1] for r in rows[1:]]
    values = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    return values, labels, stages


@dataclass
class MetricReport:
    """One run's detection quality plus the knobs that produced it."""

    per_class_ap50: dict
    mean_novel_ap50: float
    seed: int
    k: int
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        for class_id, ap in self.per_class_ap50.items():
            if not 0.0 <= ap <= 1.0:
                raise ContractError(f"AP out of range for class {class_id}: {ap}")
        if self.per_class_ap50:
            expected = sum(self.per_class_ap50.values()) / len(self.per_class_ap50)
            if self.mean_novel_ap50 != expected:
                raise ContractError("mean_novel_ap50 is not the mean of per-class values")

    @classmethod
    def build(cls, per_class_ap50: dict, seed: int, k: int, labels=None):
        mean = (
            sum(per_class_ap50.values()) / len(per_class_ap50) if per_class_ap50 else 0.0
        )
        return cls(dict(per_class_ap50), mean, seed, k, dict(labels or {}))

    def to_json(self) -> dict:
        return {
            "per_class_ap50": {str(c): v for c, v in sorted(self.per_class_ap50.items())},
            "mean_novel_ap50": self.mean_novel_ap50,
            "seed": self.seed,
            "k": self.k,
            "labels": dict(self.labels),
        }


@dataclass
class ClusterReport:
    """Nearest-centroid accuracy at the three support-feature stages."""

    accuracy_raw: float
    accuracy_pre_isam: float
    accuracy_post_isam: float

    def __post_init__(self):
        for name in ("accuracy_raw", "accuracy_pre_isam", "accuracy_post_isam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} out of range: {v}")

    def to_json(self) -> dict:
        return {
            "accuracy_raw": self.accuracy_raw,
            "accuracy_pre_isam": self.accuracy_pre_isam,
            "accuracy_post_isam": self.accuracy_post_isam,
        }


def mean_std(values) -> tuple:
    """Sample mean and n-1 standard deviation of two or more numbers."""
    values = list(values)
    if len(values) < 2:
        raise ContractError("need at least two values for mean/std")
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, var**0.5


def multi_run_stats(reports: list) -> dict:
    """Per-metric mean and sample std across two or more MetricReports."""
    if len(reports) < 2:
        raise ContractError("need at least two reports")
    keys = set(reports[0].per_class_ap50)
    for r in reports[1:]:
        if set(r.per_class_ap50) != keys:
            raise ContractError("reports cover different class sets")
    per_class = {}
    for c in sorted(keys):
        m, s = mean_std([r.per_class_ap50[c] for r in reports])
        per_class[c] = {"mean": m, "std": s}
    m, s = mean_std([r.mean_novel_ap50 for r in reports])
    return {
        "runs": len(reports),
        "mean_novel_ap50": {"mean": m, "std": s},
        "per_class_ap50": per_class,
    }
