"""Annotation ingestion and dataset statistics.

Reads one VOC-style XML annotation document per image (the format emitted by
common box-labeling tools) into an immutable in-memory index, and computes
per-class instance counts, densities, and box-area statistics.
"""

from __future__ import annotations

import math
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

from .geometry import BBox

#: Default class registry: the five power line asset classes.
PLAD_LABELS = ("tower", "insulator", "spacer", "plate", "damper")


class DatasetError(Exception):
    """Base for all annotation/dataset ingestion failures."""


class AnnotationParseError(DatasetError):
    """Malformed annotation document (XML syntax, missing structure, bad box)."""


@dataclass(frozen=True)
class ClassRegistry:
    """Ordered label list; class ids are dense indices into it."""

    labels: Tuple[str, ...] = PLAD_LABELS

    def __post_init__(self):
        norm = tuple(l.strip().lower() for l in self.labels)
        if len(set(norm)) != len(norm):
            raise ValueError(f"duplicate labels in registry: {self.labels}")
        object.__setattr__(self, "labels", norm)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def id_for(self, label: str) -> Optional[int]:
        """Case-insensitive, whitespace-trimmed lookup; None if unknown."""
        key = label.strip().lower()
        try:
            return self.labels.index(key)
        except ValueError:
            return None

    def label_for(self, class_id: int) -> str:
        return self.labels[class_id]

    @property
    def ids(self) -> range:
        return range(len(self.labels))


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: BBox


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    annotations: Tuple[Annotation, ...]
    source_path: str = ""

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: non-positive dimensions {self.width}x{self.height}")


@dataclass(frozen=True)
class DatasetIndex:
    registry: ClassRegistry
    images: Tuple[ImageRecord, ...]

    def __post_init__(self):
        ids = [r.image_id for r in self.images]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate image ids: {dupes}")

    def __len__(self) -> int:
        return len(self.images)

    def image(self, image_id: str) -> ImageRecord:
        for r in self.images:
            if r.image_id == image_id:
                return r
        raise KeyError(image_id)

    def subset(self, image_ids: Iterable[str]) -> "DatasetIndex":
        wanted = set(image_ids)
        missing = wanted - {r.image_id for r in self.images}
        if missing:
            raise KeyError(f"unknown image ids: {sorted(missing)}")
        return DatasetIndex(
            self.registry,
            tuple(r for r in self.images if r.image_id in wanted),
        )


@dataclass(frozen=True)
class ClassStats:
    label: str
    instances: int
    instances_per_image: float
    mean_area: float
    std_area: float


@dataclass(frozen=True)
class DatasetStats:
    per_class: Tuple[ClassStats, ...]
    total_instances: int
    total_images: int
    instances_per_image: float


def _req(elem: ET.Element, tag: str, context: str) -> ET.Element:
    child = elem.find(tag)
    if child is None:
        raise AnnotationParseError(f"{context}: missing <{tag}> element")
    return child


def _req_number(elem: ET.Element, tag: str, context: str) -> float:
    child = _req(elem, tag, context)
    try:
        return float(child.text)
    except (TypeError, ValueError):
        raise AnnotationParseError(f"{context}: <{tag}> is not a number: {child.text!r}")


def parse_annotation_file(
    content: str,
    registry: ClassRegistry,
    image_id: Optional[str] = None,
    source_path: str = "",
) -> Tuple[ImageRecord, List[str]]:
    """Parse one VOC-style XML document into an ImageRecord.

    Returns the record plus a warning list: unknown class labels are dropped
    but reported, and out-of-bounds boxes are clamped to the image frame.
    Structural problems raise AnnotationParseError.
    """
    try:
        root = ET.fromstring(content)
    except ET.ParseError as exc:
        raise AnnotationParseError(f"{source_path or '<string>'}: malformed XML: {exc}") from exc

    ctx = source_path or "<string>"
    if image_id is None:
        fn = root.find("filename")
        if fn is None or not (fn.text or "").strip():
            raise AnnotationParseError(f"{ctx}: missing <filename> and no image_id given")
        image_id = Path(fn.text.strip()).stem

    size = root.find("size")
    if size is None:
        raise AnnotationParseError(f"{ctx}: missing <size> element")
    width = int(_req_number(size, "width", ctx))
    height = int(_req_number(size, "height", ctx))
    if width <= 0 or height <= 0:
        raise AnnotationParseError(f"{ctx}: non-positive image size {width}x{height}")

    warnings: List[str] = []
    annotations: List[Annotation] = []
    for idx, obj in enumerate(root.findall("object")):
        name = _req(obj, "name", f"{ctx}: object #{idx}")
        label = (name.text or "").strip()
        class_id = registry.id_for(label)
        if class_id is None:
            warnings.append(f"{ctx}: object #{idx}: unknown class label {label!r}, skipped")
            continue
        bnd = _req(obj, "bndbox", f"{ctx}: object #{idx}")
        x_min = _req_number(bnd, "xmin", f"{ctx}: object #{idx}")
        y_min = _req_number(bnd, "ymin", f"{ctx}: object #{idx}")
        x_max = _req_number(bnd, "xmax", f"{ctx}: object #{idx}")
        y_max = _req_number(bnd, "ymax", f"{ctx}: object #{idx}")
        if x_min > x_max or y_min > y_max:
            raise AnnotationParseError(
                f"{ctx}: object #{idx} ({label}): inverted box "
                f"({x_min}, {y_min}, {x_max}, {y_max})"
            )
        cx_min = min(max(x_min, 0.0), width)
        cy_min = min(max(y_min, 0.0), height)
        cx_max = min(max(x_max, 0.0), width)
        cy_max = min(max(y_max, 0.0), height)
        if (cx_min, cy_min, cx_max, cy_max) != (x_min, y_min, x_max, y_max):
            warnings.append(
                f"{ctx}: object #{idx} ({label}): box exceeds image bounds, clamped"
            )
        annotations.append(Annotation(class_id, BBox(cx_min, cy_min, cx_max, cy_max)))

    record = ImageRecord(image_id, width, height, tuple(annotations), source_path)
    return record, warnings


def record_to_voc_xml(record: ImageRecord, registry: ClassRegistry) -> str:
    """Serialize an ImageRecord back to a VOC-style XML document."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = f"{record.image_id}.jpg"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(record.width)
    ET.SubElement(size, "height").text = str(record.height)
    ET.SubElement(size, "depth").text = "3"
    for ann in record.annotations:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = registry.label_for(ann.class_id)
        bnd = ET.SubElement(obj, "bndbox")
        ET.SubElement(bnd, "xmin").text = repr(ann.box.x_min)
        ET.SubElement(bnd, "ymin").text = repr(ann.box.y_min)
        ET.SubElement(bnd, "xmax").text = repr(ann.box.x_max)
        ET.SubElement(bnd, "ymax").text = repr(ann.box.y_max)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode")


def load_dataset(
    root: str | os.PathLike,
    registry: Optional[ClassRegistry] = None,
    annotations_subdir: Optional[str] = None,
) -> Tuple[DatasetIndex, List[str]]:
    """Load every *.xml annotation under ``root`` into a DatasetIndex.

    If ``annotations_subdir`` is not given and root contains an
    ``Annotations`` (or ``annotations``) directory, that directory is used;
    otherwise root itself. Image order is lexicographic by image id,
    independent of filesystem enumeration order.
    """
    registry = registry or ClassRegistry()
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    ann_dir = root
    if annotations_subdir is not None:
        ann_dir = root / annotations_subdir
        if not ann_dir.is_dir():
            raise DatasetError(f"annotation directory not found: {ann_dir}")
    else:
        for candidate in ("Annotations", "annotations"):
            if (root / candidate).is_dir():
                ann_dir = root / candidate
                break

    records: dict[str, ImageRecord] = {}
    warnings: List[str] = []
    for path in sorted(ann_dir.glob("*.xml")):
        record, w = parse_annotation_file(
            path.read_text(), registry, image_id=path.stem, source_path=str(path)
        )
        if record.image_id in records:
            raise DatasetError(f"duplicate image id: {record.image_id}")
        records[record.image_id] = record
        warnings.extend(w)

    images = tuple(records[k] for k in sorted(records))
    return DatasetIndex(registry, images), warnings


def compute_stats(index: DatasetIndex) -> DatasetStats:
    """Per-class instance counts, densities, and box-area mean/population stddev."""
    if len(index) == 0:
        raise DatasetError("cannot compute statistics of an empty index")
    n_images = len(index)
    per_class = []
    total = 0
    for class_id in index.registry.ids:
        areas = [
            ann.box.area
            for rec in index.images
            for ann in rec.annotations
            if ann.class_id == class_id
        ]
        count = len(areas)
        total += count
        if areas:
            mean = sum(areas) / count
            var = sum((a - mean) ** 2 for a in areas) / count
            std = math.sqrt(var)
        else:
            mean = std = 0.0
        per_class.append(
            ClassStats(
                label=index.registry.label_for(class_id),
                instances=count,
                instances_per_image=count / n_images,
                mean_area=mean,
                std_area=std,
            )
        )
    return DatasetStats(
        per_class=tuple(per_class),
        total_instances=total,
        total_images=n_images,
        instances_per_image=total / n_images,
    )
