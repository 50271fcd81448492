"""Detection evaluation: greedy matching, per-class AP, mAP, aggregation.

Detections are pooled across all test images per class, swept in descending
score order, and matched greedily against ground truth at a fixed IoU
threshold (0.5 by default). AP supports all-points interpolation (area under
the precision envelope) and the classic eleven-point scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .dataset import DatasetIndex
from .geometry import BBox, ScoredBox, iou

INTERPOLATION_MODES = ("all-points", "eleven-point")


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    ap_interpolation: str = "all-points"

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0,1]: {self.iou_threshold}")
        if self.ap_interpolation not in INTERPOLATION_MODES:
            raise ValueError(f"unknown interpolation mode: {self.ap_interpolation!r}")


@dataclass(frozen=True)
class PRCurve:
    """(recall, precision) points over the descending-score sweep."""

    recalls: Tuple[float, ...]
    precisions: Tuple[float, ...]
    scores: Tuple[float, ...]
    n_gt: int


@dataclass(frozen=True)
class ClassEval:
    ap: float
    n_gt: int
    n_tp: int
    n_fp: int
    curve: PRCurve
    zero_gt: bool = False  # flagged when the split had no GT of this class


@dataclass(frozen=True)
class EvalReport:
    class_labels: Tuple[str, ...]
    per_class: Mapping[str, ClassEval]
    config: EvalConfig

    @property
    def per_class_ap(self) -> Dict[str, float]:
        return {label: self.per_class[label].ap for label in self.class_labels}

    @property
    def map_score(self) -> float:
        aps = [self.per_class[label].ap for label in self.class_labels]
        return sum(aps) / len(aps)

    @classmethod
    def from_aps(
        cls, labels: Sequence[str], aps: Mapping[str, float], config: Optional[EvalConfig] = None
    ) -> "EvalReport":
        """Build a report directly from per-class APs (e.g. published tables)."""
        empty = PRCurve((), (), (), 0)
        per_class = {
            label: ClassEval(ap=float(aps[label]), n_gt=0, n_tp=0, n_fp=0, curve=empty)
            for label in labels
        }
        return cls(tuple(labels), per_class, config or EvalConfig())


@dataclass(frozen=True)
class AggregateReport:
    class_labels: Tuple[str, ...]
    mean_ap_per_class: Mapping[str, float]
    mean_map: float
    runs: Tuple[EvalReport, ...]


def match(
    gt: Sequence[BBox],
    dets: Sequence[ScoredBox],
    iou_threshold: float,
) -> Tuple[List[bool], Dict[int, int]]:
    """Greedy single-class single-image matching.

    Detections are visited in descending score order (input order breaks
    ties); each claims the unmatched GT with highest IoU if that IoU is
    >= threshold. Returns TP flags aligned to the input detection order and
    a {det_index: gt_index} map.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    tp = [False] * len(dets)
    assigned: Dict[int, int] = {}
    taken = [False] * len(gt)
    for i in order:
        best_iou = 0.0
        best_j = -1
        for j, g in enumerate(gt):
            if taken[j]:
                continue
            v = iou(dets[i].box, g)
            if v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0 and best_iou >= iou_threshold:
            tp[i] = True
            taken[best_j] = True
            assigned[i] = best_j
    return tp, assigned


def average_precision(
    tp_flags: Sequence[bool], n_gt: int, interpolation: str = "all-points"
) -> float:
    """AP from TP flags already sorted by descending score.

    0 GT and 0 detections -> 1.0; 0 GT with detections -> 0.0.
    """
    if n_gt == 0:
        return 1.0 if len(tp_flags) == 0 else 0.0
    if not tp_flags:
        return 0.0
    precisions: List[float] = []
    recalls: List[float] = []
    tp_cum = 0
    for i, flag in enumerate(tp_flags):
        tp_cum += int(flag)
        precisions.append(tp_cum / (i + 1))
        recalls.append(tp_cum / n_gt)
    if interpolation == "eleven-point":
        total = 0.0
        for r in [k / 10 for k in range(11)]:
            candidates = [p for p, rec in zip(precisions, recalls) if rec >= r]
            total += max(candidates) if candidates else 0.0
        return total / 11
    # all-points: area under the precision envelope vs recall
    envelope = precisions[:]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    ap = 0.0
    prev_recall = 0.0
    for rec, p_env, flag in zip(recalls, envelope, tp_flags):
        if flag:
            ap += (rec - prev_recall) * p_env
            prev_recall = rec
    return ap


def evaluate(
    gt_index: DatasetIndex,
    detections: Mapping[str, Sequence[ScoredBox]],
    config: EvalConfig = EvalConfig(),
) -> EvalReport:
    """Per-class AP and mAP over a set of images.

    Detections are keyed by image_id; every key must exist in the index.
    Degenerate ground-truth boxes can never be matched and are excluded.
    """
    known = {r.image_id for r in gt_index.images}
    unknown = set(detections) - known
    if unknown:
        raise EvaluationError(f"detections reference unknown image ids: {sorted(unknown)}")

    registry = gt_index.registry
    per_class: Dict[str, ClassEval] = {}
    for class_id in registry.ids:
        pooled: List[Tuple[float, str, int, bool]] = []
        n_gt = 0
        for record in gt_index.images:
            gt_boxes = [
                a.box for a in record.annotations
                if a.class_id == class_id and not a.box.is_degenerate
            ]
            n_gt += len(gt_boxes)
            img_dets = [
                d for d in detections.get(record.image_id, []) if d.class_id == class_id
            ]
            tp_flags, _ = match(gt_boxes, img_dets, config.iou_threshold)
            for idx, det in enumerate(img_dets):
                pooled.append((det.score, record.image_id, idx, tp_flags[idx]))
        pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
        flags = [t[3] for t in pooled]
        ap = average_precision(flags, n_gt, config.ap_interpolation)

        tp_cum = 0
        recalls, precisions = [], []
        for i, f in enumerate(flags):
            tp_cum += int(f)
            recalls.append(tp_cum / n_gt if n_gt else 0.0)
            precisions.append(tp_cum / (i + 1))
        curve = PRCurve(
            tuple(recalls), tuple(precisions), tuple(t[0] for t in pooled), n_gt
        )
        per_class[registry.label_for(class_id)] = ClassEval(
            ap=ap,
            n_gt=n_gt,
            n_tp=sum(flags),
            n_fp=len(flags) - sum(flags),
            curve=curve,
            zero_gt=(n_gt == 0),
        )
    return EvalReport(tuple(registry.labels), per_class, config)


def aggregate(reports: Sequence[EvalReport]) -> AggregateReport:
    """Arithmetic means of per-class APs and per-run mAPs over k runs."""
    if not reports:
        raise EvaluationError("cannot aggregate zero reports")
    labels = reports[0].class_labels
    for r in reports[1:]:
        if r.class_labels != labels:
            raise EvaluationError(
                f"mismatched class registries: {labels} vs {r.class_labels}"
            )
    k = len(reports)
    mean_per_class = {
        label: sum(r.per_class[label].ap for r in reports) / k for label in labels
    }
    mean_map = sum(r.map_score for r in reports) / k
    return AggregateReport(labels, mean_per_class, mean_map, tuple(reports))
