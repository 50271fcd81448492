"""Axis-aligned bounding-box arithmetic and non-maximum suppression.

Boxes are closed real-valued rectangles in pixel coordinates. All functions
here are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple


@dataclass(frozen=True, order=True)
class BBox:
    """Axis-aligned rectangle. Zero-area (degenerate) boxes are legal."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(
                f"invalid box: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def is_degenerate(self) -> bool:
        return self.area == 0.0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def contains(self, other: "BBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and other.x_max <= self.x_max
            and other.y_max <= self.y_max
        )


@dataclass(frozen=True)
class ScoredBox:
    """Class-labeled, confidence-scored box, e.g. a detector output.

    ``provenance`` is an opaque audit tag (branch name, tile id) attached by
    the pipeline; it never affects geometry.
    """

    box: BBox
    class_id: int
    score: float
    provenance: Optional[tuple] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of range: {self.score}")


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has zero area."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def translate(b: BBox, dx: float, dy: float) -> BBox:
    return BBox(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy)


def clip(b: BBox, region: BBox) -> Optional[BBox]:
    """Intersection rectangle of ``b`` and ``region``; None when it has zero area."""
    x_min = max(b.x_min, region.x_min)
    y_min = max(b.y_min, region.y_min)
    x_max = min(b.x_max, region.x_max)
    y_max = min(b.y_max, region.y_max)
    if x_max - x_min <= 0.0 or y_max - y_min <= 0.0:
        return None
    return BBox(x_min, y_min, x_max, y_max)


def _nms_sort_key(d: ScoredBox):
    # Descending score; equal scores fall back to lexicographic box order so
    # the keep-set is deterministic across platforms.
    return (-d.score, d.box.as_tuple(), d.class_id)


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy class-wise non-maximum suppression.

    A box is kept iff its IoU with every already-kept box of the same class
    is strictly below ``iou_threshold``. Degenerate boxes always lose.
    Output is sorted by descending score.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold out of range: {iou_threshold}")
    kept: list[ScoredBox] = []
    for cand in sorted(boxes, key=_nms_sort_key):
        if cand.box.is_degenerate:
            continue
        if all(
            iou(cand.box, k.box) < iou_threshold
            for k in kept
            if k.class_id == cand.class_id
        ):
            kept.append(cand)
    return kept
