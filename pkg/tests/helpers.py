"""Shared test fixtures and independent reference implementations.

The reference implementations here are deliberately written from the
contract definitions with their own arithmetic, so the main code paths are
checked against something that cannot share their bugs.
"""

from __future__ import annotations

import random
from typing import Dict, List, Sequence, Tuple

from mspad.dataset import Annotation, ClassRegistry, DatasetIndex, ImageRecord
from mspad.geometry import BBox, ScoredBox

LABELS = ("tower", "insulator", "spacer", "plate", "damper")

# Published five-run cross-validation APs, used as aggregation fixtures.
# Keyed by approach, then class label; five values per class (one per run).
RUN_APS = {
    "original": {
        "tower": (0.885, 0.883, 0.875, 0.920, 0.945),
        "insulator": (0.825, 0.924, 0.931, 0.839, 0.874),
        "spacer": (0.917, 0.789, 0.914, 0.863, 0.853),
        "plate": (0.932, 0.830, 0.941, 0.984, 0.995),
        "damper": (0.189, 0.201, 0.189, 0.264, 0.227),
    },
    "ours": {
        "tower": (0.905, 0.901, 0.874, 0.883, 0.938),
        "insulator": (0.938, 0.866, 0.893, 0.884, 0.889),
        "spacer": (0.810, 0.850, 0.910, 0.805, 0.905),
        "plate": (0.994, 1.00, 0.990, 0.997, 0.876),
        "damper": (0.829, 0.882, 0.870, 0.824, 0.787),
    },
}

# Per-run mAPs as printed alongside the per-class rows.
RUN_MAPS = {
    "original": (0.750, 0.725, 0.770, 0.774, 0.779),
    "ours": (0.895, 0.900, 0.907, 0.879, 0.879),
}

# Averages of the five runs, as printed in the side-by-side comparison.
MEAN_APS = {
    "original": {"tower": 0.902, "insulator": 0.879, "spacer": 0.867, "plate": 0.936, "damper": 0.214},
    "ours": {"tower": 0.900, "insulator": 0.894, "spacer": 0.856, "plate": 0.971, "damper": 0.838},
}
MEAN_MAPS = {"ours": 0.892}
# The comparison table prints 0.755 for the original-approach mAP, but the
# mean of its own per-run mAPs (and of its per-class means) is 0.7596; this
# suite asserts the arithmetic value 0.760.
MEAN_MAP_ORIGINAL_COMPUTED = 0.760
MEAN_MAP_ORIGINAL_PRINTED = 0.755


# --------------------------------------------------------------- geometry

def raster_iou(a: BBox, b: BBox, samples: int = 500) -> float:
    """IoU by counting sample points on a fine grid over both boxes."""
    x0 = min(a.x_min, b.x_min)
    y0 = min(a.y_min, b.y_min)
    x1 = max(a.x_max, b.x_max)
    y1 = max(a.y_max, b.y_max)
    if x1 == x0 or y1 == y0:
        return 0.0
    inter = union = 0
    for i in range(samples):
        x = x0 + (i + 0.5) * (x1 - x0) / samples
        for j in range(samples):
            y = y0 + (j + 0.5) * (y1 - y0) / samples
            in_a = a.x_min <= x <= a.x_max and a.y_min <= y <= a.y_max
            in_b = b.x_min <= x <= b.x_max and b.y_min <= y <= b.y_max
            if in_a and in_b:
                inter += 1
            if in_a or in_b:
                union += 1
    return inter / union if union else 0.0


def iou_reference(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = iw * ih if (iw > 0 and ih > 0) else 0.0
    area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min)
    area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms_reference(dets: Sequence[ScoredBox], threshold: float) -> List[ScoredBox]:
    """O(n^2) keep-set reference for greedy class-wise NMS."""
    ordered = sorted(
        dets, key=lambda d: (-d.score, d.box.as_tuple(), d.class_id)
    )
    kept: List[ScoredBox] = []
    for d in ordered:
        if d.box.area == 0.0:
            continue
        suppressed = False
        for k in kept:
            if k.class_id != d.class_id:
                continue
            if iou_reference(k.box, d.box) >= threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(d)
    return kept


# ------------------------------------------------------------- evaluation

def match_reference(
    gt: Sequence[BBox], dets: Sequence[ScoredBox], threshold: float
) -> List[bool]:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = set()
    tp = [False] * len(dets)
    for i in order:
        ious = [
            iou_reference(dets[i].box, g) if j not in used else -1.0
            for j, g in enumerate(gt)
        ]
        if not ious:
            continue
        best = max(ious)
        if best >= threshold:
            j = ious.index(best)  # lowest index wins exact ties
            used.add(j)
            tp[i] = True
    return tp


def ap_reference(flags: Sequence[bool], n_gt: int, mode: str = "all-points") -> float:
    if n_gt == 0:
        return 1.0 if not flags else 0.0
    if not flags:
        return 0.0
    precisions, recalls = [], []
    tp = 0
    for i, f in enumerate(flags):
        tp += 1 if f else 0
        precisions.append(tp / (i + 1))
        recalls.append(tp / n_gt)
    if mode == "eleven-point":
        acc = 0.0
        for k in range(11):
            r = k / 10
            best = 0.0
            for p, rec in zip(precisions, recalls):
                if rec >= r and p > best:
                    best = p
            acc += best
        return acc / 11
    ap = 0.0
    prev = 0.0
    for i, f in enumerate(flags):
        if f:
            env = max(precisions[i:])
            ap += (recalls[i] - prev) * env
            prev = recalls[i]
    return ap


def evaluate_reference(
    index: DatasetIndex,
    detections: Dict[str, Sequence[ScoredBox]],
    threshold: float = 0.5,
    mode: str = "all-points",
) -> Dict[str, float]:
    """Brute-force per-class AP over pooled images."""
    out = {}
    for class_id in index.registry.ids:
        pooled: List[Tuple[float, str, int, bool]] = []
        n_gt = 0
        for rec in index.images:
            gt = [a.box for a in rec.annotations if a.class_id == class_id and a.box.area > 0]
            n_gt += len(gt)
            dets = [d for d in detections.get(rec.image_id, []) if d.class_id == class_id]
            flags = match_reference(gt, dets, threshold)
            for i, d in enumerate(dets):
                pooled.append((d.score, rec.image_id, i, flags[i]))
        pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
        out[index.registry.label_for(class_id)] = ap_reference(
            [t[3] for t in pooled], n_gt, mode
        )
    return out


# ----------------------------------------------------------- synthetic data

def make_synthetic_index(
    n_images: int = 4,
    seed: int = 0,
    width: int = 5472,
    height: int = 3648,
    boxes_per_class: int = 4,
    registry: ClassRegistry | None = None,
) -> DatasetIndex:
    """Random annotation set where same-class boxes keep IoU < 0.45, so NMS
    fusion can never merge two distinct ground truths. Damper boxes are small
    and some deliberately straddle 4x4 tile borders."""
    registry = registry or ClassRegistry(LABELS)
    rng = random.Random(seed)
    images = []
    for n in range(n_images):
        annotations: List[Annotation] = []
        for class_id in registry.ids:
            label = registry.label_for(class_id)
            small = label == "damper"
            placed: List[BBox] = []
            attempts = 0
            while len(placed) < boxes_per_class and attempts < 500:
                attempts += 1
                if small:
                    w = rng.uniform(20, 80)
                    h = rng.uniform(20, 80)
                else:
                    w = rng.uniform(120, 900)
                    h = rng.uniform(120, 900)
                if small and len(placed) % 2 == 0:
                    # straddle a vertical tile border of the 4x4 grid
                    border = (width // 4) * rng.randint(1, 3)
                    x0 = border - w / 2
                else:
                    x0 = rng.uniform(0, width - w)
                y0 = rng.uniform(0, height - h)
                box = BBox(x0, y0, x0 + w, y0 + h)
                if all(iou_reference(box, p) < 0.45 for p in placed):
                    placed.append(box)
            annotations.extend(Annotation(class_id, b) for b in placed)
        images.append(
            ImageRecord(f"img_{n:03d}", width, height, tuple(annotations))
        )
    return DatasetIndex(registry, tuple(images))


def random_scored_boxes(
    rng: random.Random,
    n: int,
    n_classes: int = 3,
    span: float = 100.0,
    allow_degenerate: bool = False,
) -> List[ScoredBox]:
    out = []
    for _ in range(n):
        x0 = rng.uniform(0, span)
        y0 = rng.uniform(0, span)
        if allow_degenerate and rng.random() < 0.05:
            box = BBox(x0, y0, x0, y0 + rng.uniform(0, 10))
        else:
            box = BBox(x0, y0, x0 + rng.uniform(1, span / 2), y0 + rng.uniform(1, span / 2))
        score = rng.choice([rng.random(), round(rng.random(), 1)])  # force ties
        out.append(ScoredBox(box, rng.randrange(n_classes), score))
    return out
